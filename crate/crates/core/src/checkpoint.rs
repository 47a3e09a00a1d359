//! Named-tensor container.
//!
//! Layout: `MPT1`, an 8-byte little-endian header length, a UTF-8 JSON
//! header, then every tensor as little-endian f32 in index order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    Magic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("payload checksum mismatch")]
    Checksum,
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: Option<ModelConfig>,
    step: u64,
    #[serde(default)]
    extra: serde_json::Value,
    payload_sha256: String,
    tensors: IndexMap<String, TensorEntry>,
}

/// Configuration, step counter and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Option<ModelConfig>,
    pub step: u64,
    /// Free-form metadata (LoRA or adaptor settings, effective run config).
    pub extra: serde_json::Value,
    pub tensors: Params,
}

impl Checkpoint {
    pub fn new(model: Option<ModelConfig>, step: u64, tensors: Params) -> Self {
        Checkpoint {
            model,
            step,
            extra: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.numel() * 4);
        let mut index = IndexMap::new();
        for (name, t) in self.tensors.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            index.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    length: payload.len() as u64 - offset,
                },
            );
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            step: self.step,
            extra: self.extra.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors: index,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Length("file ends inside the header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if hlen > body.len() {
            return Err(CheckpointError::Length(format!(
                "header declares {hlen} bytes, {} available",
                body.len()
            )));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version { found: found as u32 });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &body[hlen..];

        let mut expected = 0u64;
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Header(format!("`{name}` has dtype {}", e.dtype)));
            }
            if e.offset != expected {
                return Err(CheckpointError::Header(format!(
                    "`{name}` starts at {} but the previous tensor ends at {expected}",
                    e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.shape.is_empty() {
                return Err(CheckpointError::Header(format!("`{name}` has an empty shape")));
            }
            if numel as u64 * 4 != e.length {
                return Err(CheckpointError::Length(format!(
                    "`{name}` shape {:?} needs {} bytes, header declares {}",
                    e.shape,
                    numel * 4,
                    e.length
                )));
            }
            expected += e.length;
        }
        if payload.len() as u64 != expected {
            return Err(CheckpointError::Length(format!(
                "payload has {} bytes, index declares {expected}",
                payload.len()
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CheckpointError::Checksum);
        }
        let mut tensors = Params::new();
        for (name, e) in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            extra: header.extra,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
