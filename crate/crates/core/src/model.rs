//! Llama-style decoder-only backbone.
//!
//! Pre-norm residual blocks (`x + Attn(RMSNorm(x))`, then
//! `x + SwiGLU(RMSNorm(x))`), rotary positions on queries and keys, no
//! biases, and a final RMSNorm. There is no token embedding or output
//! table: inputs are supplied as vectors and outputs are scored against a
//! caller-provided set of candidate vectors.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::{Real, RopeTable, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub attn_dropout: f64,
    pub rmsnorm_eps: f64,
}

/// `4d·2/3` rounded up to a multiple of 8.
pub fn default_ffn_hidden(d: usize) -> usize {
    let raw = (8 * d).div_ceil(3);
    raw.div_ceil(8) * 8
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_dims(4, 256, 2)
    }
}

impl ModelConfig {
    pub fn with_dims(num_layers: usize, hidden_dim: usize, num_heads: usize) -> Self {
        ModelConfig {
            num_layers,
            hidden_dim,
            num_heads,
            max_seq_len: 1024,
            ffn_hidden: default_ffn_hidden(hidden_dim),
            rope_base: 10_000.0,
            attn_dropout: 0.0,
            rmsnorm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_hidden == 0 {
            return fail("layers, hidden size, heads and ffn size must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary pairs",
                self.head_dim()
            ));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return fail(format!("attention dropout {} not in [0, 1)", self.attn_dropout));
        }
        if !(self.rope_base > 0.0 && self.rmsnorm_eps > 0.0) {
            return fail("rope_base and rmsnorm_eps must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count of the backbone.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let per_layer = 4 * d * d + 3 * d * self.ffn_hidden + 2 * d;
        self.num_layers * per_layer + d
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<F: Real = f32> {
    tensors: IndexMap<String, Tensor<F>>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Adds every tensor of `other`, keeping its names.
    pub fn extend(&mut self, other: Params<F>) {
        self.tensors.extend(other.tensors);
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params<F> {
        Params {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Attention projections that can carry a low-rank update.
pub const ATTN_PROJECTIONS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

/// Standard normal truncated to ±2σ by rejection, scaled by `std`.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}

/// Backbone weights: linear layers ~ N(0, 0.02²) truncated at ±2σ, gains 1.
/// Tensor `i` (in naming order) draws from stream `(seed, ModelInit, i)`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let f = cfg.ffn_hidden;
    let mut p = Params::new();
    let mut idx = 0u64;
    let mut linear = |p: &mut Params, name: String, shape: [usize; 2]| {
        let mut r = rng::stream(seed, Purpose::ModelInit, idx);
        idx += 1;
        p.insert(name, truncated_normal(&shape, 0.02, &mut r));
    };
    for l in 0..cfg.num_layers {
        p.insert(layer_param(l, "attn_norm"), Tensor::full(&[d], 1.0));
        for w in ATTN_PROJECTIONS {
            linear(&mut p, layer_param(l, w), [d, d]);
        }
        p.insert(layer_param(l, "ffn_norm"), Tensor::full(&[d], 1.0));
        linear(&mut p, layer_param(l, "w_gate"), [d, f]);
        linear(&mut p, layer_param(l, "w_up"), [d, f]);
        linear(&mut p, layer_param(l, "w_down"), [f, d]);
    }
    p.insert("final_norm", Tensor::full(&[d], 1.0));
    Ok(p)
}

/// Checks that `params` holds exactly the backbone tensors `cfg` implies.
pub fn check_backbone(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let d = cfg.hidden_dim;
    let f = cfg.ffn_hidden;
    let mut want: Vec<(String, Vec<usize>)> = Vec::new();
    for l in 0..cfg.num_layers {
        want.push((layer_param(l, "attn_norm"), vec![d]));
        for w in ATTN_PROJECTIONS {
            want.push((layer_param(l, w), vec![d, d]));
        }
        want.push((layer_param(l, "ffn_norm"), vec![d]));
        want.push((layer_param(l, "w_gate"), vec![d, f]));
        want.push((layer_param(l, "w_up"), vec![d, f]));
        want.push((layer_param(l, "w_down"), vec![f, d]));
    }
    want.push(("final_norm".into(), vec![d]));
    for (name, shape) in want {
        let t = params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::Config(format!(
                "`{name}` has shape {:?}, configuration implies {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub fn lora_param(layer: usize, proj: &str, which: &str) -> String {
    format!("lora.layer{layer}.{proj}.{which}")
}

/// Low-rank factors for every attention projection: `A` is `r × d` with
/// small random entries, `B` is `d × r` and starts at zero so the injected
/// update vanishes at initialization.
pub fn init_lora(cfg: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<Params> {
    let d = cfg.hidden_dim;
    if lora.rank == 0 || lora.rank > d {
        return Err(ModelError::Config(format!(
            "LoRA rank {} must be in 1..={d}",
            lora.rank
        )));
    }
    let mut p = Params::new();
    let mut idx = 10_000u64;
    let bound = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.num_layers {
        for w in ATTN_PROJECTIONS {
            let mut r = rng::stream(seed, Purpose::ModelInit, idx);
            idx += 1;
            let a = Tensor::from_fn(&[lora.rank, d], |_| r.gen_range(-bound..bound) as f32);
            p.insert(lora_param(l, w, "a"), a);
            p.insert(lora_param(l, w, "b"), Tensor::zeros(&[d, lora.rank]));
        }
    }
    Ok(p)
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Records every tensor of `params` as a leaf; `trainable` decides
    /// whether gradients flow to them.
    pub fn new<F: Real>(tape: &mut Tape<F>, params: &Params<F>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn empty() -> Self {
        Bound { vars: IndexMap::new() }
    }

    /// Binds already-recorded variables under the given names.
    pub fn from_vars<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn maybe(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Per-call switches of [`forward`].
pub struct ForwardOptions<'a> {
    pub causal: bool,
    /// Attention-probability dropout stream; `None` disables dropout.
    pub dropout: Option<&'a mut StreamRng>,
    /// Low-rank updates (bound on the same tape) and their configuration.
    pub lora: Option<(&'a Bound, &'a LoraConfig)>,
    pub record_attention: bool,
    pub rotary: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            causal: true,
            dropout: None,
            lora: None,
            record_attention: false,
            rotary: true,
        }
    }
}

pub struct ForwardOutput {
    pub hidden: Var,
    /// Post-softmax attention per layer, `[B, heads, T, T]`, when requested.
    pub attention: Vec<Var>,
}

fn project<F: Real>(
    tape: &mut Tape<F>,
    weights: &Bound,
    x: Var,
    layer: usize,
    name: &str,
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    let base = tape.matmul(x, weights.var(&layer_param(layer, name))?)?;
    let Some((lora, cfg)) = opts.lora else {
        return Ok(base);
    };
    let (Some(a), Some(b)) = (
        lora.maybe(&lora_param(layer, name, "a")),
        lora.maybe(&lora_param(layer, name, "b")),
    ) else {
        return Ok(base);
    };
    let input = match opts.dropout.as_deref_mut() {
        Some(r) if cfg.dropout > 0.0 => tape.dropout(x, cfg.dropout, r)?,
        _ => x,
    };
    let down = tape.linear(input, a, true)?;
    let up = tape.linear(down, b, true)?;
    let scaled = tape.scale(up, F::from_f64(cfg.scaling()));
    Ok(tape.add(base, scaled)?)
}

/// Runs the backbone on `x[B, T, d]` and returns the normalized hidden
/// states `[B, T, d]`.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    weights: &Bound,
    x: Var,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.hidden_dim {
        return Err(TensorError::Dimension {
            op: "forward",
            detail: format!("expected [B, T, {}], got {shape:?}", cfg.hidden_dim),
        }
        .into());
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t > cfg.max_seq_len {
        return Err(ModelError::Length {
            len: t,
            max: cfg.max_seq_len,
        });
    }
    let (h, hd) = (cfg.num_heads, cfg.head_dim());
    let positions: Vec<f64> = (0..t).map(|p| p as f64).collect();
    let table = Arc::new(RopeTable::<F>::new(&positions, hd, cfg.rope_base)?);
    let inv_sqrt = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut attention = Vec::new();
    let mut x = x;
    for l in 0..cfg.num_layers {
        let n = tape.rmsnorm(x, weights.var(&layer_param(l, "attn_norm"))?, cfg.rmsnorm_eps)?;
        let heads = |tape: &mut Tape<F>, name: &str, rotate: bool, opts: &mut ForwardOptions<'_>| -> Result<Var> {
            let p = project(tape, weights, n, l, name, opts)?;
            let p = tape.reshape(p, &[b, t, h, hd])?;
            let p = if rotate && opts.rotary {
                tape.rope(p, Arc::clone(&table))?
            } else {
                p
            };
            Ok(tape.swap_axes12(p)?)
        };
        let q = heads(tape, "w_q", true, &mut opts)?;
        let k = heads(tape, "w_k", true, &mut opts)?;
        let v = heads(tape, "w_v", false, &mut opts)?;
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, inv_sqrt);
        let probs = if opts.causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores)?
        };
        if opts.record_attention {
            attention.push(probs);
        }
        let probs = match opts.dropout.as_deref_mut() {
            Some(r) if cfg.attn_dropout > 0.0 => tape.dropout(probs, cfg.attn_dropout, r)?,
            _ => probs,
        };
        let ctx = tape.bmm(probs, v, false, false)?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let out = project(tape, weights, ctx, l, "w_o", &mut opts)?;
        x = tape.add(x, out)?;

        let n = tape.rmsnorm(x, weights.var(&layer_param(l, "ffn_norm"))?, cfg.rmsnorm_eps)?;
        let gate = tape.matmul(n, weights.var(&layer_param(l, "w_gate"))?)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(n, weights.var(&layer_param(l, "w_up"))?)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, weights.var(&layer_param(l, "w_down"))?)?;
        x = tape.add(x, down)?;
    }
    let hidden = tape.rmsnorm(x, weights.var("final_norm")?, cfg.rmsnorm_eps)?;
    Ok(ForwardOutput { hidden, attention })
}

/// Next-state logits: inner products of `hidden[B, T, d]` with each
/// trajectory's frame `reps[B, S, d]`, giving `[B, T, S]`.
pub fn nsp_logits<F: Real>(tape: &mut Tape<F>, hidden: Var, reps: Var) -> Result<Var> {
    let (hs, rs) = (tape.shape(hidden).to_vec(), tape.shape(reps).to_vec());
    if hs.len() != 3 || rs.len() != 3 || hs[0] != rs[0] || hs[2] != rs[2] {
        return Err(TensorError::Dimension {
            op: "nsp_logits",
            detail: format!("hidden {hs:?} against frames {rs:?}"),
        }
        .into());
    }
    Ok(tape.bmm(hidden, reps, false, true)?)
}
