//! Run configuration: built-in defaults, then a config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpt_core::model::{ModelConfig, ModelError};
use mpt_core::pretrain::PretrainConfig;
use mpt_core::rec::{FinetuneConfig, ShuffleMode, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::Exit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Derived from `hidden_dim` when unset.
    pub ffn_hidden: Option<usize>,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            ffn_hidden: None,
            max_seq_len: m.max_seq_len,
            rope_base: m.rope_base,
            rmsnorm_eps: m.rmsnorm_eps,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig, ModelError> {
        let mut m = ModelConfig::with_dims(self.num_layers, self.hidden_dim, self.num_heads);
        if let Some(f) = self.ffn_hidden {
            m.ffn_hidden = f;
        }
        m.max_seq_len = self.max_seq_len;
        m.rope_base = self.rope_base;
        m.rmsnorm_eps = self.rmsnorm_eps;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `mpt`, `popularity` or `oracle`.
    pub scorer: String,
    pub modes: Vec<ShuffleMode>,
    pub cutoffs: Vec<usize>,
    /// `test` or `valid`.
    pub target: String,
    /// Context length; the fine-tuned model's own setting when unset.
    pub max_len: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// First evaluation stream for `eval-nsp`.
    pub index_base: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            scorer: "mpt".into(),
            modes: ShuffleMode::ALL.to_vec(),
            cutoffs: vec![1, 10, 20],
            target: "test".into(),
            max_len: None,
            batch_size: 128,
            seed: 0,
            index_base: 1 << 40,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alpha: Vec<f64>,
    pub num_states: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    pub total_tokens: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synth: SynthConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            threads: 0,
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The config as JSON for embedding into reports; absent optional
    /// values are omitted so the result loads back through `--config`.
    pub fn to_json(&self) -> serde_json::Value {
        let t = toml::Value::try_from(self).expect("config serializes");
        serde_json::to_value(t).expect("TOML values map to JSON")
    }

    pub fn require(&self, path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        match path {
            Some(p) => Ok(p.clone()),
            None => Err(Exit::config(format!("missing {flag}")).into()),
        }
    }
}

/// Flag values, applied last as dotted-key assignments.
#[derive(Default)]
pub struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            let v = toml::Value::try_from(v).expect("flag value serializes");
            self.0.push((key.to_string(), v));
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn assign(root: &mut toml::Value, key: &str, value: toml::Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().expect("config sections are tables");
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .expect("config sections are tables")
        .insert(parts[parts.len() - 1].to_string(), value);
}

/// Reads a TOML config file, or a JSON report whose `config` field holds
/// an embedded effective config.
fn read_file(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Exit::config(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Exit::config(format!("{}: {e}", path.display())))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        return toml::Value::try_from(v).map_err(|e| Exit::config(format!("{}: {e}", path.display())).into());
    }
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Exit::config(format!("{}: {e}", path.display())).into())
}

/// `base` (built-in defaults or a preset) ← file ← flags.
pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(&base).context("serializing defaults")?;
    if let Some(path) = file {
        merge(&mut value, read_file(path)?);
    }
    for (k, v) in overrides.0 {
        assign(&mut value, &k, v);
    }
    let cfg = RunConfig::deserialize(value).map_err(|e| Exit::config(format!("invalid configuration: {e}")))?;
    if cfg.eval.scorer != "mpt" && cfg.eval.scorer != "popularity" && cfg.eval.scorer != "oracle" {
        bail!(Exit::config(format!("unknown scorer `{}`", cfg.eval.scorer)));
    }
    if cfg.eval.target != "test" && cfg.eval.target != "valid" {
        bail!(Exit::config(format!("unknown target `{}`", cfg.eval.target)));
    }
    Ok(cfg)
}
