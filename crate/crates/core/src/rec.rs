//! Next-item recommendation on top of a pre-trained backbone.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use crate::markov::{sample_trajectory, sample_transition_matrix, DirichletPrior, MarkovError, TransitionMatrix};
use crate::model::{forward, init_lora, Bound, ForwardOptions, LoraConfig, ModelError, Params};
use crate::pretrain::Backbone;
use crate::rng::{stream, Purpose};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, ParamGroup, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum RecError {
    #[error("no users")]
    NoUsers,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = RecError> = std::result::Result<T, E>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| RecError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn write(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|e| RecError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Chronological item sequences per user plus an item embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub sequences: Vec<Vec<usize>>,
    pub embeddings: Tensor,
}

impl InteractionDataset {
    pub fn new(sequences: Vec<Vec<usize>>, embeddings: Tensor) -> Result<Self> {
        if sequences.is_empty() {
            return Err(RecError::NoUsers);
        }
        if embeddings.shape().len() != 2 {
            return Err(RecError::Dimension(format!(
                "embeddings must be 2-D, got {:?}",
                embeddings.shape()
            )));
        }
        if !embeddings.is_finite() {
            return Err(RecError::Format {
                line: 0,
                msg: "non-finite embedding value".into(),
            });
        }
        let n = embeddings.shape()[0];
        for (u, seq) in sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&v| v >= n) {
                return Err(RecError::Format {
                    line: u + 1,
                    msg: format!("item {bad} out of range for {n} items"),
                });
            }
        }
        Ok(InteractionDataset { sequences, embeddings })
    }

    pub fn num_items(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn write(&self, sequences_path: &Path, embeddings_path: &Path) -> Result<()> {
        write(sequences_path, format_sequences(&self.sequences).as_bytes())?;
        if embeddings_path.extension().is_some_and(|e| e == "mpt") {
            let mut p = Params::new();
            p.insert("embeddings", self.embeddings.clone());
            Checkpoint::new(None, 0, p).save(embeddings_path)?;
            Ok(())
        } else {
            write(embeddings_path, format_embeddings(&self.embeddings).as_bytes())
        }
    }
}

pub fn format_sequences(seqs: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn format_embeddings(t: &Tensor) -> String {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("{n} {d}\n");
    for i in 0..n {
        let row: Vec<String> = t.row(i).iter().map(f32::to_string).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// One user per line; blank lines and `#` comments are skipped.
pub fn parse_sequences(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| RecError::Format {
                    line: i + 1,
                    msg: format!("`{tok}` is not a non-negative integer"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    if out.is_empty() {
        return Err(RecError::NoUsers);
    }
    Ok(out)
}

/// `num_items dim` header followed by one row per item.
pub fn parse_embeddings(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(RecError::Format {
        line: 1,
        msg: "missing `num_items dim` header".into(),
    })?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| RecError::Format {
            line: 1,
            msg: "header must be `num_items dim`".into(),
        })?;
    let [n, d] = head[..] else {
        return Err(RecError::Format {
            line: 1,
            msg: "header must be `num_items dim`".into(),
        });
    };
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (i, line) in lines {
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| RecError::Format {
                        line: i + 1,
                        msg: format!("`{t}` is not a finite number"),
                    })
            })
            .collect::<Result<_>>()?;
        if vals.len() != d {
            return Err(RecError::Format {
                line: i + 1,
                msg: format!("expected {d} values, found {}", vals.len()),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != n {
        return Err(RecError::Format {
            line: 1,
            msg: format!("header declares {n} items, file has {rows}"),
        });
    }
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Text embeddings, or the binary checkpoint container holding a tensor
/// named `embeddings`.
pub fn load_embeddings(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    if bytes.starts_with(MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        return Ok(ck.tensors.get("embeddings")?.clone());
    }
    let text = String::from_utf8(bytes).map_err(|_| RecError::Format {
        line: 0,
        msg: "embeddings file is neither UTF-8 text nor a checkpoint".into(),
    })?;
    parse_embeddings(&text)
}

pub fn load_dataset(sequences_path: &Path, embeddings_path: &Path) -> Result<InteractionDataset> {
    let text = String::from_utf8(read(sequences_path)?).map_err(|_| RecError::Format {
        line: 0,
        msg: "sequences file is not UTF-8".into(),
    })?;
    let seqs = parse_sequences(&text)?;
    let emb = load_embeddings(embeddings_path)?;
    // report the original line number for out-of-range items
    let n = emb.shape()[0];
    let mut user = 0;
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(&bad) = seqs[user].iter().find(|&&v| v >= n) {
            return Err(RecError::Format {
                line: i + 1,
                msg: format!("item {bad} out of range for {n} items"),
            });
        }
        user += 1;
    }
    InteractionDataset::new(seqs, emb)
}

/// Leave-one-out view of one user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserSplit<'a> {
    pub user: usize,
    full: &'a [usize],
}

impl<'a> UserSplit<'a> {
    pub fn train(&self) -> &'a [usize] {
        &self.full[..self.full.len() - 2]
    }
    pub fn valid_context(&self) -> &'a [usize] {
        self.train()
    }
    pub fn valid_target(&self) -> usize {
        self.full[self.full.len() - 2]
    }
    pub fn test_context(&self) -> &'a [usize] {
        &self.full[..self.full.len() - 1]
    }
    pub fn test_target(&self) -> usize {
        self.full[self.full.len() - 1]
    }
    pub fn context(&self, target: Target) -> &'a [usize] {
        match target {
            Target::Valid => self.valid_context(),
            Target::Test => self.test_context(),
        }
    }
    pub fn target(&self, target: Target) -> usize {
        match target {
            Target::Valid => self.valid_target(),
            Target::Test => self.test_target(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaveOneOut<'a> {
    pub users: Vec<UserSplit<'a>>,
    /// Users with fewer than three interactions.
    pub excluded: usize,
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> LeaveOneOut<'_> {
    let mut users = Vec::new();
    let mut excluded = 0;
    for (user, full) in ds.sequences.iter().enumerate() {
        if full.len() < 3 {
            excluded += 1;
        } else {
            users.push(UserSplit { user, full });
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} users with fewer than 3 interactions excluded from the split");
    }
    LeaveOneOut { users, excluded }
}

pub const LEAKY_SLOPE: f64 = 0.01;
pub const ADAPTOR_EPS: f64 = 1e-5;

/// RMSNorm gain, then `W1 + b1`, LeakyReLU, `W2 + b2`. Linear layers use
/// uniform `±1/sqrt(fan_in)` initialization for weights and biases.
pub fn init_adaptor(d_text: usize, hidden: usize, d_out: usize, seed: u64) -> Params {
    let mut p = Params::new();
    let uniform = |idx: u64, shape: &[usize], fan_in: usize| {
        let mut r = stream(seed, Purpose::AdaptorInit, idx);
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| r.gen_range(-bound..bound) as f32)
    };
    let w1 = uniform(0, &[d_text, hidden], d_text);
    let b1 = uniform(1, &[hidden], d_text);
    let w2 = uniform(2, &[hidden, d_out], hidden);
    let b2 = uniform(3, &[d_out], hidden);
    p.insert("adaptor.norm", Tensor::full(&[d_text], 1.0));
    p.insert("adaptor.w1", w1);
    p.insert("adaptor.b1", b1);
    p.insert("adaptor.w2", w2);
    p.insert("adaptor.b2", b2);
    p
}

pub fn adaptor_forward<F: crate::tensor::Real>(tape: &mut Tape<F>, w: &Bound, x: Var) -> Result<Var> {
    let d_text = tape.value(w.var("adaptor.norm")?).numel();
    if tape.value(x).last_dim() != d_text {
        return Err(RecError::Dimension(format!(
            "item embeddings have dimension {}, adaptor expects {d_text}",
            tape.value(x).last_dim()
        )));
    }
    let n = tape.rmsnorm(x, w.var("adaptor.norm")?, ADAPTOR_EPS)?;
    let h = tape.matmul(n, w.var("adaptor.w1")?)?;
    let h = tape.add_bias(h, w.var("adaptor.b1")?)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let o = tape.matmul(h, w.var("adaptor.w2")?)?;
    Ok(tape.add_bias(o, w.var("adaptor.b2")?)?)
}

/// `cos(hidden_i, item_v) / τ` for every row of `hidden [n, d]` against
/// `items [V, d]`; vectors with norm below 1e-12 score 0.
pub fn score_items<F: crate::tensor::Real>(tape: &mut Tape<F>, hidden: Var, items: Var, tau: f64) -> Result<Var> {
    let h = tape.l2_normalize(hidden);
    let v = tape.l2_normalize(items);
    let cos = tape.linear(h, v, true)?;
    Ok(tape.scale(cos, F::from_f64(1.0 / tau)))
}

/// Tape-free scoring of one hidden vector.
pub fn score_vector(hidden: &[f32], items: &Tensor, tau: f64) -> Vec<f32> {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let hn = norm(hidden);
    (0..items.rows())
        .map(|i| {
            let row = items.row(i);
            let rn = norm(row);
            if hn < 1e-12 || rn < 1e-12 {
                return 0.0;
            }
            let dot: f64 = hidden.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
            (dot / (hn * rn) / tau) as f32
        })
        .collect()
}

/// 1 + items scoring strictly higher + equal-scoring items with a smaller
/// index.
pub fn rank_of_target(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

pub fn hr_at(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    Chronological,
    Partial,
    Complete,
}

impl ShuffleMode {
    pub const ALL: [ShuffleMode; 3] = [ShuffleMode::Chronological, ShuffleMode::Partial, ShuffleMode::Complete];
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleMode::Chronological => "chronological",
            ShuffleMode::Partial => "partial",
            ShuffleMode::Complete => "complete",
        })
    }
}

impl FromStr for ShuffleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chronological" => Ok(ShuffleMode::Chronological),
            "partial" => Ok(ShuffleMode::Partial),
            "complete" => Ok(ShuffleMode::Complete),
            other => Err(format!("unknown shuffle mode `{other}`")),
        }
    }
}

/// Chronological keeps the order; partial permutes all but the last item;
/// complete permutes everything.
pub fn shuffle_sequence<R: Rng + ?Sized>(seq: &[usize], mode: ShuffleMode, rng: &mut R) -> Vec<usize> {
    let mut out = seq.to_vec();
    match mode {
        ShuffleMode::Chronological => {}
        ShuffleMode::Partial => {
            let n = out.len();
            if n > 1 {
                out[..n - 1].shuffle(rng);
            }
        }
        ShuffleMode::Complete => out.shuffle(rng),
    }
    out
}

/// Keeps the most recent `max_len` items.
pub fn truncate_recent(seq: &[usize], max_len: usize) -> &[usize] {
    &seq[seq.len().saturating_sub(max_len)..]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    AdaptorOnly,
    AdaptorPlusLora,
}

impl FromStr for FinetuneMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adaptor_only" => Ok(FinetuneMode::AdaptorOnly),
            "adaptor_plus_lora" => Ok(FinetuneMode::AdaptorPlusLora),
            other => Err(format!("unknown fine-tuning mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Width of the adaptor's hidden layer; the backbone width when unset.
    pub adaptor_hidden: Option<usize>,
    pub lora: LoraConfig,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-3,
            weight_decay: 0.1,
            max_len: 50,
            dropout: 0.2,
            temperature: 0.07,
            mode: FinetuneMode::AdaptorOnly,
            epochs: 100,
            batch_size: 16,
            patience: 5,
            adaptor_hidden: None,
            lora: LoraConfig::default(),
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        let fail = |m: String| Err(RecError::Config(m));
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.max_len == 0 || self.max_len > backbone.config.max_seq_len {
            return fail(format!(
                "max_len {} must be in 1..={}",
                self.max_len, backbone.config.max_seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.lora.dropout) {
            return fail("dropout rates must be in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip_norm > 0.0) {
            return fail("lr and weight_decay must be non-negative, grad_clip_norm positive".into());
        }
        Ok(())
    }
}

/// Backbone plus the fine-tuned adaptor and optional LoRA factors.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub backbone: Backbone,
    pub adaptor: Params,
    pub lora: Option<(Params, LoraConfig)>,
    pub temperature: f64,
    pub max_len: usize,
}

impl RecModel {
    pub fn new(backbone: Backbone, cfg: &FinetuneConfig, d_text: usize) -> Result<Self> {
        let d = backbone.config.hidden_dim;
        let adaptor = init_adaptor(d_text, cfg.adaptor_hidden.unwrap_or(d), d, cfg.seed);
        let lora = match cfg.mode {
            FinetuneMode::AdaptorOnly => None,
            FinetuneMode::AdaptorPlusLora => {
                Some((init_lora(&backbone.config, &cfg.lora, cfg.seed)?, cfg.lora.clone()))
            }
        };
        Ok(RecModel {
            backbone,
            adaptor,
            lora,
            temperature: cfg.temperature,
            max_len: cfg.max_len,
        })
    }

    /// Adaptor, LoRA factors and settings; the backbone is stored separately.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut p = self.adaptor.clone();
        if let Some((l, _)) = &self.lora {
            p.extend(l.clone());
        }
        let mut ck = Checkpoint::new(Some(self.backbone.config.clone()), step, p);
        ck.extra = serde_json::json!({
            "temperature": self.temperature,
            "max_len": self.max_len,
            "lora": self.lora.as_ref().map(|(_, c)| c),
        });
        ck
    }

    pub fn from_checkpoints(backbone: Backbone, head: &Checkpoint) -> Result<Self> {
        if head.model.as_ref() != Some(&backbone.config) {
            return Err(RecError::Dimension(
                "adaptor checkpoint was trained on another backbone".into(),
            ));
        }
        let adaptor = head.tensors.with_prefix("adaptor.");
        for name in ["adaptor.norm", "adaptor.w1", "adaptor.b1", "adaptor.w2", "adaptor.b2"] {
            adaptor.get(name)?;
        }
        if adaptor.get("adaptor.w2")?.shape()[1] != backbone.config.hidden_dim {
            return Err(RecError::Dimension(
                "adaptor output does not match the backbone width".into(),
            ));
        }
        let extra = &head.extra;
        let temperature = extra["temperature"]
            .as_f64()
            .ok_or_else(|| RecError::Config("adaptor checkpoint lacks a temperature".into()))?;
        let max_len = extra["max_len"]
            .as_u64()
            .ok_or_else(|| RecError::Config("adaptor checkpoint lacks max_len".into()))? as usize;
        let lora = if extra["lora"].is_null() {
            None
        } else {
            let cfg: LoraConfig =
                serde_json::from_value(extra["lora"].clone()).map_err(|e| RecError::Config(e.to_string()))?;
            Some((head.tensors.with_prefix("lora."), cfg))
        };
        Ok(RecModel {
            backbone,
            adaptor,
            lora,
            temperature,
            max_len,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.adaptor.get("adaptor.norm").map_or(0, Tensor::numel)
    }

    /// Adaptor outputs for every item, `[V, d]`.
    pub fn item_representations(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = Bound::new(&mut tape, &self.adaptor, false);
        let x = tape.constant(embeddings.clone());
        let out = adaptor_forward(&mut tape, &w, x)?;
        Ok(tape.take_value(out))
    }

    /// Runs the backbone over right-padded item sequences; returns the
    /// hidden state at each sequence's last position and, optionally, the
    /// attention maps.
    fn last_hidden(
        &self,
        item_reprs: &Tensor,
        contexts: &[Vec<usize>],
        record_attention: bool,
    ) -> Result<(Vec<Vec<f32>>, Vec<Tensor>)> {
        let d = self.backbone.config.hidden_dim;
        let len = contexts.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || contexts.iter().any(Vec::is_empty) {
            return Err(RecError::Config("empty context".into()));
        }
        let mut x = Vec::with_capacity(contexts.len() * len * d);
        for c in contexts {
            for t in 0..len {
                x.extend_from_slice(item_reprs.row(c.get(t).copied().unwrap_or(c[0])));
            }
        }
        let mut tape = Tape::new();
        let w = Bound::new(&mut tape, &self.backbone.params, false);
        let lb = self.lora.as_ref().map(|(p, c)| (Bound::new(&mut tape, p, false), c));
        let xv = tape.constant(Tensor::new(vec![contexts.len(), len, d], x)?);
        let opts = ForwardOptions {
            lora: lb.as_ref().map(|(b, c)| (b, *c)),
            record_attention,
            ..Default::default()
        };
        let out = forward(&mut tape, &self.backbone.config, &w, xv, opts)?;
        let h = tape.value(out.hidden);
        let last = contexts
            .iter()
            .enumerate()
            .map(|(b, c)| h.row(b * len + c.len() - 1).to_vec())
            .collect();
        let attn = out.attention.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((last, attn))
    }
}

/// Scores every item for a batch of users.
pub trait ItemScorer: Sync {
    fn score_batch(&self, users: &[usize], contexts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>>;
}

/// A fine-tuned model with item representations precomputed.
pub struct MptScorer<'a> {
    pub model: &'a RecModel,
    pub item_reprs: Tensor,
}

impl<'a> MptScorer<'a> {
    pub fn new(model: &'a RecModel, embeddings: &Tensor) -> Result<Self> {
        Ok(MptScorer {
            model,
            item_reprs: model.item_representations(embeddings)?,
        })
    }
}

impl ItemScorer for MptScorer<'_> {
    fn score_batch(&self, _users: &[usize], contexts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        let (hidden, _) = self.model.last_hidden(&self.item_reprs, contexts, false)?;
        Ok(hidden
            .iter()
            .map(|h| score_vector(h, &self.item_reprs, self.model.temperature))
            .collect())
    }
}

/// Training-split item frequencies; the same scores for every user.
pub struct PopularityScorer {
    pub counts: Vec<f32>,
}

pub fn popularity_baseline(split: &LeaveOneOut<'_>, num_items: usize) -> PopularityScorer {
    let mut counts = vec![0f32; num_items];
    for u in &split.users {
        for &v in u.train() {
            counts[v] += 1.0;
        }
    }
    PopularityScorer { counts }
}

impl ItemScorer for PopularityScorer {
    fn score_batch(&self, users: &[usize], _contexts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        Ok(vec![self.counts.clone(); users.len()])
    }
}

/// Generator ground truth: the latent chains and each user's chain.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub chains: Vec<TransitionMatrix>,
    pub user_chain: Vec<usize>,
}

/// Ranks items by the true transition row of the user's chain at the last
/// context item.
pub struct OracleScorer<'a> {
    pub truth: &'a GroundTruth,
}

impl ItemScorer for OracleScorer<'_> {
    fn score_batch(&self, users: &[usize], contexts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        Ok(users
            .iter()
            .zip(contexts)
            .map(|(&u, c)| {
                let p = &self.truth.chains[self.truth.user_chain[u]];
                p.row(*c.last().expect("non-empty context"))
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecRow {
    pub mode: ShuffleMode,
    #[serde(rename = "N")]
    pub n: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecEvalReport {
    pub rows: Vec<RecRow>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RecEvalReport {
    pub fn get(&self, mode: ShuffleMode, n: usize) -> Option<&RecRow> {
        self.rows.iter().find(|r| r.mode == mode && r.n == n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| RecError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
        write(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())?;
        write(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }
}

/// Evaluation options shared by every mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub target: Target,
    pub modes: Vec<ShuffleMode>,
    pub cutoffs: Vec<usize>,
    pub max_len: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            target: Target::Test,
            modes: ShuffleMode::ALL.to_vec(),
            cutoffs: vec![1, 10, 20],
            max_len: 50,
            seed: 0,
            batch_size: 128,
        }
    }
}

/// Rank of each user's target under one shuffle mode; the context is
/// truncated to the most recent `max_len` items before shuffling. User `u`
/// shuffles with stream `(seed, Shuffle, u)`.
pub fn target_ranks<S: ItemScorer>(
    scorer: &S,
    split: &LeaveOneOut<'_>,
    mode: ShuffleMode,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let chunks: Vec<&[UserSplit<'_>]> = split.users.chunks(opts.batch_size.max(1)).collect();
    let ranks: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|chunk| {
            let users: Vec<usize> = chunk.iter().map(|u| u.user).collect();
            let contexts: Vec<Vec<usize>> = chunk
                .iter()
                .map(|u| {
                    let ctx = truncate_recent(u.context(opts.target), opts.max_len);
                    match mode {
                        ShuffleMode::Chronological => ctx.to_vec(),
                        _ => shuffle_sequence(ctx, mode, &mut stream(opts.seed, Purpose::Shuffle, u.user as u64)),
                    }
                })
                .collect();
            let scores = scorer.score_batch(&users, &contexts)?;
            Ok(chunk
                .iter()
                .zip(&scores)
                .map(|(u, s)| rank_of_target(s, u.target(opts.target)))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(ranks.concat())
}

pub fn evaluate_rec<S: ItemScorer>(scorer: &S, split: &LeaveOneOut<'_>, opts: &EvalOptions) -> Result<RecEvalReport> {
    if split.users.is_empty() {
        return Err(RecError::NoUsers);
    }
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        let ranks = target_ranks(scorer, split, mode, opts)?;
        let users = ranks.len();
        for &n in &opts.cutoffs {
            let hr = ranks.iter().map(|&r| hr_at(r, n)).sum::<f64>() / users as f64;
            let ndcg = ranks.iter().map(|&r| ndcg_at(r, n)).sum::<f64>() / users as f64;
            rows.push(RecRow {
                mode,
                n,
                hr,
                ndcg,
                users,
                seed: opts.seed,
            });
        }
    }
    Ok(RecEvalReport {
        rows,
        config: serde_json::Value::Null,
    })
}

/// Mean NIP loss of a batch recorded on `tape`. Sequences are truncated to
/// their last `max_len + 1` items, right-padded, and supervised at every
/// position that has a successor.
#[allow(clippy::too_many_arguments)]
pub fn nip_loss(
    tape: &mut Tape,
    model: &RecModel,
    adaptor: &Bound,
    backbone: &Bound,
    lora: Option<&Bound>,
    embeddings: Var,
    sequences: &[&[usize]],
    dropout: Option<&mut crate::rng::StreamRng>,
    attn_dropout: f64,
) -> Result<Var> {
    let items = adaptor_forward(tape, adaptor, embeddings)?;
    let seqs: Vec<&[usize]> = sequences
        .iter()
        .map(|s| truncate_recent(s, model.max_len + 1))
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let len = seqs.iter().map(|s| s.len() - 1).max().unwrap();
    let (b, d) = (seqs.len(), model.backbone.config.hidden_dim);
    let mut index = Vec::with_capacity(b * len);
    let mut targets = Vec::with_capacity(b * len);
    for s in &seqs {
        for t in 0..len {
            if t + 1 < s.len() {
                index.push(s[t]);
                targets.push(Some(s[t + 1]));
            } else {
                index.push(s[0]);
                targets.push(None);
            }
        }
    }
    let x = tape.gather_rows(items, &index)?;
    let x = tape.reshape(x, &[b, len, d])?;
    let mut cfg = model.backbone.config.clone();
    cfg.attn_dropout = attn_dropout;
    let lora_cfg = model.lora.as_ref().map(|(_, c)| c);
    let opts = ForwardOptions {
        dropout,
        lora: lora.zip(lora_cfg),
        ..Default::default()
    };
    let out = forward(tape, &cfg, backbone, x, opts)?;
    let hidden = tape.reshape(out.hidden, &[b * len, d])?;
    let scores = score_items(tape, hidden, items, model.temperature)?;
    Ok(tape.cross_entropy(scores, &targets)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, reason: String },
}

pub struct FinetuneOutcome {
    /// Weights from the epoch with the best validation NDCG@10.
    pub model: RecModel,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub stop: StopReason,
}

fn valid_ndcg10(model: &RecModel, ds: &InteractionDataset, split: &LeaveOneOut<'_>) -> Result<f64> {
    let scorer = MptScorer::new(model, &ds.embeddings)?;
    let opts = EvalOptions {
        target: Target::Valid,
        modes: vec![ShuffleMode::Chronological],
        cutoffs: vec![10],
        max_len: model.max_len,
        ..Default::default()
    };
    Ok(evaluate_rec(&scorer, split, &opts)?.rows[0].ndcg)
}

/// Epoch loop over the training views with validation NDCG@10 after every
/// epoch; keeps the best weights and stops after `patience` epochs without
/// improvement. Backbone weights are never updated.
pub fn finetune_run(backbone: &Backbone, ds: &InteractionDataset, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate(backbone)?;
    let split = leave_one_out_split(ds);
    if split.users.is_empty() {
        return Err(RecError::NoUsers);
    }
    let mut model = RecModel::new(backbone.clone(), cfg, ds.text_dim())?;
    let mut best = model.clone();
    let mut best_ndcg = if cfg.epochs > 0 {
        valid_ndcg10(&model, ds, &split)?
    } else {
        0.0
    };
    let mut best_epoch = 0;
    let mut curve = Vec::new();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..split.users.len()).collect();
    let mut global_step = 0u64;
    let mut stop = StopReason::Completed;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, Purpose::FinetuneOrder, epoch as u64));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| split.users[i].train()).collect();
            let mut rng = stream(cfg.seed, Purpose::Dropout, global_step);
            global_step += 1;
            match finetune_step(&mut model, &mut opt, ds, &seqs, cfg, &mut rng) {
                Ok(Some(l)) => {
                    loss_sum += l;
                    batches += 1;
                }
                Ok(None) => {}
                Err(RecError::Tensor(TensorError::NonFinite { op }))
                | Err(RecError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                    stop = StopReason::Diverged {
                        epoch,
                        reason: format!("non-finite values in {op}"),
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if matches!(stop, StopReason::Diverged { .. }) {
            break;
        }
        let ndcg = valid_ndcg10(&model, ds, &split)?;
        curve.push(EpochRecord {
            epoch,
            train_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
            valid_ndcg10: ndcg,
        });
        log::info!(
            "epoch {epoch} loss {:.4} valid ndcg@10 {ndcg:.4}",
            curve.last().unwrap().train_loss
        );
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(FinetuneOutcome {
        model: best,
        curve,
        best_epoch,
        best_valid_ndcg10: best_ndcg,
        stop,
    })
}

/// One optimizer step on the adaptor (and LoRA factors); `None` when the
/// batch has nothing to supervise.
pub fn finetune_step(
    model: &mut RecModel,
    opt: &mut AdamW,
    ds: &InteractionDataset,
    seqs: &[&[usize]],
    cfg: &FinetuneConfig,
    rng: &mut crate::rng::StreamRng,
) -> Result<Option<f64>> {
    if seqs.iter().all(|s| s.len() < 2) {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let bb = Bound::new(&mut tape, &model.backbone.params, false);
    let ab = Bound::new(&mut tape, &model.adaptor, true);
    let lb = model.lora.as_ref().map(|(p, _)| Bound::new(&mut tape, p, true));
    let emb = tape.constant(ds.embeddings.clone());
    let dropout = (cfg.dropout > 0.0 || cfg.lora.dropout > 0.0).then_some(rng);
    let loss = nip_loss(&mut tape, model, &ab, &bb, lb.as_ref(), emb, seqs, dropout, cfg.dropout)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "nip_loss".into() }.into());
    }
    tape.backward(loss)?;

    let mut names: Vec<(String, Var)> = ab.iter().map(|(k, v)| (k.clone(), *v)).collect();
    if let Some(lb) = &lb {
        names.extend(lb.iter().map(|(k, v)| (k.clone(), *v)));
    }
    let mut grads: Vec<Vec<f32>> = names
        .iter()
        .map(|(_, v)| {
            tape.grad(*v)
                .map_or_else(|| vec![0.0; tape.value(*v).numel()], <[f32]>::to_vec)
        })
        .collect();
    {
        let mut views: Vec<&mut [f32]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
        clip_grad_norm(&mut views, cfg.grad_clip_norm);
    }
    let grad_of: HashMap<&str, &[f32]> = names
        .iter()
        .map(|(k, _)| k.as_str())
        .zip(grads.iter().map(Vec::as_slice))
        .collect();
    let mut groups: Vec<ParamGroup<'_, f32>> = Vec::new();
    let lora_params = model.lora.as_mut().map(|(p, _)| p);
    for (name, value) in model
        .adaptor
        .iter_mut()
        .chain(lora_params.into_iter().flat_map(|p| p.iter_mut()))
    {
        groups.push(ParamGroup {
            decay: value.shape().len() > 1,
            grad: grad_of[name.as_str()],
            name: name.as_str(),
            value,
        });
    }
    opt.step(&mut groups)?;
    Ok(Some(value))
}

/// Per-layer `[heads, T, T]` attention of one (truncated) sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sequence: Vec<usize>,
    /// `layers × heads × T × T`.
    pub attention: Vec<Vec<Vec<Vec<f32>>>>,
}

pub fn dump_attention(model: &RecModel, embeddings: &Tensor, sequence: &[usize]) -> Result<AttentionDump> {
    if sequence.is_empty() {
        return Err(RecError::Config("empty sequence".into()));
    }
    if sequence.len() > model.max_len {
        return Err(RecError::Config(format!(
            "sequence of {} items exceeds max_len {}",
            sequence.len(),
            model.max_len
        )));
    }
    if let Some(&bad) = sequence.iter().find(|&&v| v >= embeddings.rows()) {
        return Err(RecError::Format {
            line: 0,
            msg: format!("item {bad} out of range"),
        });
    }
    let reprs = model.item_representations(embeddings)?;
    let (_, attn) = model.last_hidden(&reprs, &[sequence.to_vec()], true)?;
    let t = sequence.len();
    let attention = attn
        .iter()
        .map(|a| {
            let heads = a.shape()[1];
            (0..heads)
                .map(|h| {
                    (0..t)
                        .map(|i| a.data()[(h * t + i) * t..(h * t + i + 1) * t].to_vec())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(AttentionDump {
        sequence: sequence.to_vec(),
        attention,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_chains: usize,
    pub alpha: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub d_text: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 500,
            num_items: 200,
            num_chains: 3,
            alpha: 0.0003,
            min_len: 40,
            max_len: 60,
            d_text: 64,
            seed: 0,
        }
    }
}

pub const MAX_SYNTH_ITEMS: usize = 10_000;

/// Users walk one of `num_chains` Dirichlet-sampled item chains; items get
/// random unit embeddings.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<(InteractionDataset, GroundTruth)> {
    if cfg.num_items == 0 || cfg.num_items > MAX_SYNTH_ITEMS {
        return Err(RecError::Config(format!("num_items must be in 1..={MAX_SYNTH_ITEMS}")));
    }
    if cfg.num_users == 0 || cfg.num_chains == 0 || cfg.d_text == 0 {
        return Err(RecError::Config("users, chains and d_text must be positive".into()));
    }
    if cfg.min_len < 3 || cfg.min_len > cfg.max_len {
        return Err(RecError::Config("need 3 <= min_len <= max_len".into()));
    }
    let prior = Arc::new(DirichletPrior::symmetric(cfg.num_items, cfg.alpha)?);
    let chains: Vec<TransitionMatrix> = (0..cfg.num_chains)
        .map(|k| sample_transition_matrix(&prior, &mut stream(cfg.seed, Purpose::SynthData, k as u64)))
        .collect();
    let mut r = stream(cfg.seed, Purpose::SynthData, 1 << 32);
    let mut emb = Vec::with_capacity(cfg.num_items * cfg.d_text);
    for _ in 0..cfg.num_items {
        let v: Vec<f64> = (0..cfg.d_text).map(|_| r.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        emb.extend(v.iter().map(|x| (x / n) as f32));
    }
    generate_with_chains(cfg, chains, Tensor::new(vec![cfg.num_items, cfg.d_text], emb)?)
}

/// Samples user sequences from given chains; user `u` uses stream
/// `(seed, SynthData, (1 << 33) + u)`.
pub fn generate_with_chains(
    cfg: &SynthConfig,
    chains: Vec<TransitionMatrix>,
    embeddings: Tensor,
) -> Result<(InteractionDataset, GroundTruth)> {
    let mut sequences = Vec::with_capacity(cfg.num_users);
    let mut user_chain = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let mut r = stream(cfg.seed, Purpose::SynthData, (1u64 << 33) + u as u64);
        let k = r.gen_range(0..chains.len());
        let len = r.gen_range(cfg.min_len..=cfg.max_len);
        sequences.push(sample_trajectory(&chains[k], len, &mut r)?.states);
        user_chain.push(k);
    }
    Ok((
        InteractionDataset::new(sequences, embeddings)?,
        GroundTruth { chains, user_chain },
    ))
}
