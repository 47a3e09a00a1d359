//! Next-state-prediction pre-training on freshly sampled Markov chains.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::markov::{
    bayes_limit_loss, bayes_sequential_nll, sample_orthonormal_reps, sample_trajectory, sample_transition_matrix,
    DirichletPrior, Estimate, MarkovError, Trajectory,
};
use crate::model::{
    check_backbone, forward, init_model, nsp_logits, Bound, ForwardOptions, ModelConfig, ModelError, Params,
};
use crate::rng::{stream, Purpose};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, ParamGroup, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Last checkpoint written before the divergence, if any.
        last_good: Option<PathBuf>,
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("report i/o: {0}")]
    Report(String),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub num_states: usize,
    pub alpha: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    /// Supervised targets to train on; rounded up to whole steps.
    pub total_tokens: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Extra evaluation points: the first step whose token count reaches each value.
    pub eval_tokens: Vec<u64>,
    pub bayes_chains: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            num_states: 30,
            alpha: 0.05,
            seq_len: 1024,
            batch_size: 32,
            total_tokens: 10_000_000,
            lr: 3e-4,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            eval_every: 100,
            eval_batches: 8,
            eval_tokens: Vec::new(),
            bayes_chains: 2_000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Small preset: |S| = 10, T = 256, 2M tokens, lr 1e-3.
    pub fn desk() -> Self {
        PretrainConfig {
            num_states: 10,
            seq_len: 256,
            total_tokens: 2_000_000,
            lr: 1e-3,
            eval_every: 50,
            ..Default::default()
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len.saturating_sub(1)) as u64
    }

    pub fn num_steps(&self) -> usize {
        self.total_tokens.div_ceil(self.tokens_per_step().max(1)) as usize
    }

    pub fn prior(&self) -> Result<DirichletPrior> {
        Ok(DirichletPrior::symmetric(self.num_states, self.alpha)?)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(PretrainError::Config(m));
        if self.num_states == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return fail("num_states, batch_size, eval_every and eval_batches must be positive".into());
        }
        if self.num_states > model.hidden_dim {
            return fail(format!(
                "{} states do not fit an orthonormal frame in {} dimensions",
                self.num_states, model.hidden_dim
            ));
        }
        if self.seq_len < 2 || self.seq_len > model.max_seq_len {
            return fail(format!("seq_len {} must be in 2..={}", self.seq_len, model.max_seq_len));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha {} must be positive", self.alpha));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip_norm > 0.0) {
            return fail("lr and weight_decay must be non-negative, grad_clip_norm positive".into());
        }
        if self.bayes_chains == 0 {
            return fail("bayes_chains must be positive".into());
        }
        Ok(())
    }
}

/// Which pair of random streams a batch draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Inputs `[B, T, d]`, per-trajectory frames `[B, S, d]` and targets for
/// every input position (`None` at the last one).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub reps: Tensor,
    pub targets: Vec<Option<usize>>,
    pub trajectories: Vec<Trajectory>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.trajectories.len()
    }
}

/// Trajectory `b` draws its chain from stream `index_base + b` of the
/// split's trajectory purpose and its frame from the matching frame purpose.
pub fn sample_batch(cfg: &PretrainConfig, hidden_dim: usize, split: Split, index_base: u64) -> Result<Batch> {
    if cfg.num_states > hidden_dim {
        return Err(PretrainError::Config(format!(
            "{} states do not fit an orthonormal frame in {hidden_dim} dimensions",
            cfg.num_states
        )));
    }
    let (traj_purpose, frame_purpose) = match split {
        Split::Train => (Purpose::TrainTrajectory, Purpose::TrainFrame),
        Split::Eval => (Purpose::EvalTrajectory, Purpose::EvalFrame),
    };
    let prior = Arc::new(cfg.prior()?);
    let (b, t, s, d) = (cfg.batch_size, cfg.seq_len, cfg.num_states, hidden_dim);
    let mut inputs = Vec::with_capacity(b * t * d);
    let mut reps = Vec::with_capacity(b * s * d);
    let mut targets = Vec::with_capacity(b * t);
    let mut trajectories = Vec::with_capacity(b);
    for k in 0..b as u64 {
        let mut r = stream(cfg.seed, traj_purpose, index_base + k);
        let p = sample_transition_matrix(&prior, &mut r);
        let traj = sample_trajectory(&p, t, &mut r)?;
        let frame = sample_orthonormal_reps(s, d, &mut stream(cfg.seed, frame_purpose, index_base + k))?;
        for &state in &traj.states {
            inputs.extend_from_slice(frame.row(state));
        }
        targets.extend(traj.states[1..].iter().map(|&v| Some(v)));
        targets.push(None);
        reps.extend_from_slice(frame.vectors.data());
        trajectories.push(traj);
    }
    Ok(Batch {
        inputs: Tensor::new(vec![b, t, d], inputs)?,
        reps: Tensor::new(vec![b, s, d], reps)?,
        targets,
        trajectories,
    })
}

/// Records the NSP loss of `batch` on `tape` and returns it with the logits.
pub fn nsp_loss(tape: &mut Tape, cfg: &ModelConfig, weights: &Bound, batch: &Batch) -> Result<(Var, Var)> {
    let x = tape.constant(batch.inputs.clone());
    let out = forward(tape, cfg, weights, x, ForwardOptions::default())?;
    let reps = tape.constant(batch.reps.clone());
    let logits = nsp_logits(tape, out.hidden, reps)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    Ok((loss, logits))
}

/// Mean NLL of each trajectory's supervised positions, from raw logits
/// `[B, T, S]`, accumulated in f64.
pub fn per_trajectory_nll(logits: &Tensor, targets: &[Option<usize>], batch_size: usize) -> Vec<f64> {
    let s = logits.last_dim();
    let rows_per = logits.rows() / batch_size;
    let mut out = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let (mut total, mut n) = (0.0f64, 0usize);
        for r in b * rows_per..(b + 1) * rows_per {
            let Some(t) = targets[r] else { continue };
            let row = &logits.data()[r * s..(r + 1) * s];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            total += z.ln() + mx - row[t] as f64;
            n += 1;
        }
        out.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    out
}

/// Anything that can assign next-state probabilities to a batch.
pub trait NspPredictor: Sync {
    /// Mean per-position NLL of every trajectory in the batch.
    fn trajectory_nll(&self, batch: &Batch) -> Result<Vec<f64>>;
}

/// Predicts the uniform distribution over states.
pub struct UniformPredictor;

impl NspPredictor for UniformPredictor {
    fn trajectory_nll(&self, batch: &Batch) -> Result<Vec<f64>> {
        let s = batch.reps.shape()[1] as f64;
        Ok(vec![s.ln(); batch.batch_size()])
    }
}

/// A backbone with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: Params,
}

impl Backbone {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        Ok(Backbone { config, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck
            .model
            .clone()
            .ok_or_else(|| PretrainError::Incompatible("checkpoint has no model configuration".into()))?;
        config.validate()?;
        let params = ck.tensors.with_prefix("layer");
        let mut all = params;
        all.insert("final_norm", ck.tensors.get("final_norm")?.clone());
        check_backbone(&config, &all).map_err(|e| PretrainError::Incompatible(e.to_string()))?;
        Ok(Backbone { config, params: all })
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint::new(Some(self.config.clone()), step, self.params.clone())
    }
}

impl NspPredictor for Backbone {
    fn trajectory_nll(&self, batch: &Batch) -> Result<Vec<f64>> {
        if batch.inputs.last_dim() != self.config.hidden_dim {
            return Err(PretrainError::Incompatible(format!(
                "batch has dimension {}, model {}",
                batch.inputs.last_dim(),
                self.config.hidden_dim
            )));
        }
        let mut tape = Tape::new();
        let w = Bound::new(&mut tape, &self.params, false);
        let (_, logits) = nsp_loss(&mut tape, &self.config, &w, batch)?;
        Ok(per_trajectory_nll(
            tape.value(logits),
            &batch.targets,
            batch.batch_size(),
        ))
    }
}

/// Held-out loss, the Bayes estimator's loss on the same trajectories, and
/// their paired difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NspEval {
    pub loss: Estimate,
    pub bayes: Estimate,
    pub gap: Estimate,
}

/// Evaluates on `num_batches` fresh held-out batches drawn from eval
/// streams starting at `index_base`.
pub fn evaluate_nsp<P: NspPredictor>(
    predictor: &P,
    cfg: &PretrainConfig,
    hidden_dim: usize,
    num_batches: usize,
    index_base: u64,
) -> Result<NspEval> {
    if num_batches == 0 {
        return Err(PretrainError::Config("need at least one evaluation batch".into()));
    }
    let prior = cfg.prior()?;
    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..num_batches)
        .into_par_iter()
        .map(|k| {
            let base = index_base + (k * cfg.batch_size) as u64;
            let batch = sample_batch(cfg, hidden_dim, Split::Eval, base)?;
            let model = predictor.trajectory_nll(&batch)?;
            let bayes = batch
                .trajectories
                .iter()
                .map(|t| {
                    let nll = bayes_sequential_nll(t, &prior)?;
                    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((model, bayes))
        })
        .collect::<Result<_>>()?;
    let model: Vec<f64> = per_batch.iter().flat_map(|(m, _)| m.iter().copied()).collect();
    let bayes: Vec<f64> = per_batch.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    let gap: Vec<f64> = model.iter().zip(&bayes).map(|(m, b)| m - b).collect();
    Ok(NspEval {
        loss: Estimate::from_samples(&model),
        bayes: Estimate::from_samples(&bayes),
        gap: Estimate::from_samples(&gap),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub tokens: u64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_stderr: f64,
    pub bayes_limit: f64,
    pub bayes_stderr: f64,
    /// Held-out loss minus the Bayes estimator's loss on the same chains.
    pub gap: f64,
    pub gap_stderr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub records: Vec<EvalRecord>,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| {
            let mut r = r.clone();
            r.records.iter_mut().for_each(|e| e.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("record serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = |e: std::io::Error| PretrainError::Report(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()).map_err(io)
    }
}

pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub report: TrainReport,
    pub steps: usize,
}

pub const CHECKPOINT_FILE: &str = "backbone.mpt";

/// Index of the first eval stream used at `step`; keeps evaluation sets of
/// different steps disjoint.
fn eval_index_base(step: usize) -> u64 {
    (step as u64) << 24
}

/// Trains from `init` (or a fresh initialization) for the configured token
/// budget, evaluating and checkpointing into `out_dir` when given.
pub fn pretrain_run(
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    init: Option<Backbone>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    let mut backbone = match init {
        Some(b) => {
            if &b.config != model_cfg {
                return Err(PretrainError::Incompatible(
                    "initial weights use another configuration".into(),
                ));
            }
            b
        }
        None => Backbone::init(model_cfg.clone(), cfg.seed)?,
    };
    let d = model_cfg.hidden_dim;
    let steps = cfg.num_steps();
    let per_step = cfg.tokens_per_step();
    let mut eval_steps: Vec<usize> = cfg
        .eval_tokens
        .iter()
        .map(|&t| t.div_ceil(per_step.max(1)).max(1) as usize)
        .filter(|&s| s <= steps)
        .collect();
    eval_steps.sort_unstable();

    let bayes = if steps > 0 {
        bayes_limit_loss(&cfg.prior()?, cfg.seq_len, cfg.bayes_chains, cfg.seed)?
    } else {
        Estimate::from_samples(&[0.0])
    };
    let mut report = TrainReport {
        model: model_cfg.clone(),
        pretrain: cfg.clone(),
        records: Vec::new(),
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PretrainError::Report(e.to_string()))?;
    }
    let save = |b: &Backbone, step: usize| -> Result<()> {
        if let Some(p) = &ckpt_path {
            let mut ck = b.to_checkpoint(step as u64);
            ck.extra = serde_json::json!({ "pretrain": cfg });
            ck.save(p)?;
        }
        Ok(())
    };
    save(&backbone, 0)?;
    let mut last_good: Option<PathBuf> = ckpt_path.clone();

    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let start = Instant::now();
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    for step in 1..=steps {
        let batch = sample_batch(cfg, d, Split::Train, ((step - 1) * cfg.batch_size) as u64)?;
        let non_finite = |e: PretrainError| match e {
            PretrainError::Tensor(TensorError::NonFinite { op }) => Err(format!("non-finite values in {op}")),
            PretrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
                Err(format!("non-finite values in {op}"))
            }
            other => Ok(other),
        };
        let diverged = |reason: String, report: &TrainReport| PretrainError::Diverged {
            step,
            reason,
            last_good: last_good.clone(),
            report: Box::new(report.clone()),
        };
        let loss = match train_step(&mut backbone, &mut opt, &batch, cfg.grad_clip_norm) {
            Ok(l) => l,
            Err(e) => return Err(non_finite(e).unwrap_or_else(|r| diverged(r, &report))),
        };
        loss_sum += loss;
        loss_n += 1;
        if step % cfg.eval_every == 0 || step == steps || eval_steps.binary_search(&step).is_ok() {
            let ev = match evaluate_nsp(&backbone, cfg, d, cfg.eval_batches, eval_index_base(step)) {
                Ok(ev) if ev.loss.mean.is_finite() => ev,
                Ok(_) => return Err(diverged("non-finite held-out loss".into(), &report)),
                Err(e) => return Err(non_finite(e).unwrap_or_else(|r| diverged(r, &report))),
            };
            report.records.push(EvalRecord {
                step,
                tokens: step as u64 * per_step,
                train_loss: loss_sum / loss_n as f64,
                eval_loss: ev.loss.mean,
                eval_stderr: ev.loss.stderr,
                bayes_limit: bayes.mean,
                bayes_stderr: bayes.stderr,
                gap: ev.gap.mean,
                gap_stderr: ev.gap.stderr,
                seconds: start.elapsed().as_secs_f64(),
            });
            log::info!(
                "step {step}/{steps} tokens {} train {:.4} eval {:.4} ± {:.4} bayes {:.4}",
                step as u64 * per_step,
                loss_sum / loss_n as f64,
                ev.loss.mean,
                ev.loss.stderr,
                bayes.mean
            );
            (loss_sum, loss_n) = (0.0, 0);
            save(&backbone, step)?;
            last_good = ckpt_path.clone();
        }
    }
    if let Some(dir) = out_dir {
        report.write(dir, "train_report")?;
    }
    Ok(PretrainOutcome {
        backbone,
        report,
        steps,
    })
}

/// One optimizer step; returns the batch loss.
pub fn train_step(backbone: &mut Backbone, opt: &mut AdamW, batch: &Batch, clip: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let w = Bound::new(&mut tape, &backbone.params, true);
    let (loss, _) = nsp_loss(&mut tape, &backbone.config, &w, batch)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "nsp_loss".into() }.into());
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = backbone
        .params
        .iter()
        .map(|(name, t)| {
            let v = w.var(name).expect("bound above");
            tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec)
        })
        .collect();
    {
        let mut views: Vec<&mut [f32]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
        clip_grad_norm(&mut views, clip);
    }
    let mut groups: Vec<ParamGroup<'_, f32>> = backbone
        .params
        .iter_mut()
        .zip(&grads)
        .map(|((name, value), grad)| ParamGroup {
            decay: value.shape().len() > 1,
            name: name.as_str(),
            value,
            grad,
        })
        .collect();
    opt.step(&mut groups)?;
    Ok(value)
}
