//! Synthetic Markov-chain world.
//!
//! Transition rows are drawn from a Dirichlet prior, trajectories are walked
//! from a uniformly drawn start state, and every trajectory gets its own
//! random orthonormal frame of state representations. The conjugate
//! posterior mean gives the Bayes-optimal next-state predictor, and
//! [`bayes_limit_loss`] estimates the loss it attains.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },
}

pub type Result<T, E = MarkovError> = std::result::Result<T, E>;

/// Concentration parameters of the prior over each transition row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    alpha: Vec<f64>,
}

impl DirichletPrior {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(MarkovError::Config("prior needs at least one state".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(MarkovError::Config(format!(
                "concentration components must be positive and finite, got {a}"
            )));
        }
        Ok(DirichletPrior { alpha })
    }

    pub fn symmetric(num_states: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![alpha; num_states])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_states(&self) -> usize {
        self.alpha.len()
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let s = self.total();
        self.alpha.iter().map(|a| a / s).collect()
    }
}

/// Row-stochastic `|S| × |S|` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    num_states: usize,
    probs: Vec<f64>,
    pub source_prior: Option<Arc<DirichletPrior>>,
    pub seed: Option<u64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(MarkovError::Config(
                "transition matrix must be square and non-empty".into(),
            ));
        }
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(MarkovError::Config(format!("row {i} is not a probability vector")));
            }
        }
        Ok(TransitionMatrix {
            num_states: n,
            probs: rows.concat(),
            source_prior: None,
            seed: None,
        })
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(rows).expect("identity is stochastic")
    }

    /// Deterministic cycle `0 → 1 → … → n−1 → 0`.
    pub fn cycle(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if j == (i + 1) % n { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(rows).expect("cycle is stochastic")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_states..(i + 1) * self.num_states]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.num_states + j]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Orthonormal frame: row `s` is the input vector for state `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateRepresentations {
    pub vectors: Tensor<f32>,
}

impl StateRepresentations {
    pub fn num_states(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, s: usize) -> &[f32] {
        self.vectors.row(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionCounts {
    num_states: usize,
    counts: Vec<u64>,
}

impl TransitionCounts {
    pub fn zeros(num_states: usize) -> Self {
        TransitionCounts {
            num_states,
            counts: vec![0; num_states * num_states],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "counts must be square");
        TransitionCounts {
            num_states: n,
            counts: rows.concat(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.num_states + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.num_states..(i + 1) * self.num_states]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, from: usize, to: usize) {
        self.counts[from * self.num_states + to] += 1;
    }
}

/// Uniform draw in `(0, 1]`, safe to take a logarithm of.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Natural log of a Gamma(shape, 1) variate.
///
/// Marsaglia–Tsang squeeze for shape ≥ 1; smaller shapes use the boost
/// `Gamma(a) = Gamma(a+1)·U^{1/a}`, kept in log space because `U^{1/a}`
/// underflows for the small concentrations used here.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let boosted = sample_log_gamma(shape + 1.0, rng);
        return boosted + open_unit(rng).ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_unit(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    sample_log_gamma(shape, rng).exp()
}

/// One probability vector from `Dir(alpha)`.
pub fn sample_dirichlet_row<R: Rng + ?Sized>(prior: &DirichletPrior, rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = prior.alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// `|S|` independent Dirichlet rows.
pub fn sample_transition_matrix<R: Rng + ?Sized>(prior: &Arc<DirichletPrior>, rng: &mut R) -> TransitionMatrix {
    let n = prior.num_states();
    let mut probs = Vec::with_capacity(n * n);
    for _ in 0..n {
        probs.extend(sample_dirichlet_row(prior, rng));
    }
    TransitionMatrix {
        num_states: n,
        probs,
        source_prior: Some(Arc::clone(prior)),
        seed: None,
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Walk of `len` states from a uniformly drawn start.
pub fn sample_trajectory<R: Rng + ?Sized>(p: &TransitionMatrix, len: usize, rng: &mut R) -> Result<Trajectory> {
    let start = rng.gen_range(0..p.num_states());
    sample_trajectory_from(p, start, len, rng)
}

pub fn sample_trajectory_from<R: Rng + ?Sized>(
    p: &TransitionMatrix,
    start: usize,
    len: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if len < 1 {
        return Err(MarkovError::Config("trajectory length must be positive".into()));
    }
    if start >= p.num_states() {
        return Err(MarkovError::Index {
            index: start,
            bound: p.num_states(),
        });
    }
    let mut states = Vec::with_capacity(len);
    states.push(start);
    for _ in 1..len {
        let cur = *states.last().unwrap();
        states.push(sample_categorical(p.row(cur), rng));
    }
    Ok(Trajectory { states })
}

/// Orthonormal rows from the QR factorization of a `d × num_states`
/// standard-Gaussian matrix, signs fixed so `R` has a positive diagonal.
///
/// The Gaussian matrix is filled row-major. Columns are orthogonalized
/// with two passes of modified Gram–Schmidt in 64-bit, which yields the
/// positive-diagonal QR factor directly.
pub fn sample_orthonormal_reps<R: Rng + ?Sized>(
    num_states: usize,
    d: usize,
    rng: &mut R,
) -> Result<StateRepresentations> {
    if num_states == 0 || d < num_states {
        return Err(MarkovError::Config(format!(
            "an orthonormal frame of {num_states} states needs dimension ≥ {num_states}, got {d}"
        )));
    }
    let gauss: Vec<f64> = (0..d * num_states).map(|_| rng.sample(StandardNormal)).collect();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(num_states);
    for j in 0..num_states {
        let mut v: Vec<f64> = (0..d).map(|i| gauss[i * num_states + j]).collect();
        for _ in 0..2 {
            for qi in &q {
                let dot: f64 = qi.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(qi).for_each(|(x, &y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(MarkovError::Config("degenerate Gaussian draw".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let data = q.iter().flatten().map(|&x| x as f32).collect();
    Ok(StateRepresentations {
        vectors: Tensor::new(vec![num_states, d], data).expect("frame shape"),
    })
}

/// `counts[i][j] = #{t : s_t = i, s_{t+1} = j}`.
pub fn count_transitions(traj: &Trajectory, num_states: usize) -> Result<TransitionCounts> {
    if let Some(&bad) = traj.states.iter().find(|&&s| s >= num_states) {
        return Err(MarkovError::Index {
            index: bad,
            bound: num_states,
        });
    }
    let mut c = TransitionCounts::zeros(num_states);
    for w in traj.states.windows(2) {
        c.record(w[0], w[1]);
    }
    Ok(c)
}

/// Posterior mean `(c_ij + α_j) / Σ_j (c_ij + α_j)` of every row.
pub fn bayes_posterior_mean(counts: &TransitionCounts, prior: &DirichletPrior) -> Result<TransitionMatrix> {
    let n = counts.num_states();
    if prior.num_states() != n {
        return Err(MarkovError::Config(format!(
            "prior has {} states, counts have {n}",
            prior.num_states()
        )));
    }
    let mut probs = Vec::with_capacity(n * n);
    for i in 0..n {
        let row: Vec<f64> = counts
            .row(i)
            .iter()
            .zip(&prior.alpha)
            .map(|(&c, &a)| c as f64 + a)
            .collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|x| x / s));
    }
    Ok(TransitionMatrix {
        num_states: n,
        probs,
        source_prior: None,
        seed: None,
    })
}

/// Per-step negative log-likelihood of the strictly causal posterior-mean
/// predictor along a trajectory: entry `t` scores `s_{t+1}` using counts
/// from `s_1..s_t` only.
pub fn bayes_sequential_nll(traj: &Trajectory, prior: &DirichletPrior) -> Result<Vec<f64>> {
    let n = prior.num_states();
    let mut counts = TransitionCounts::zeros(n);
    let mut row_totals = vec![0u64; n];
    let total_alpha = prior.total();
    let mut out = Vec::with_capacity(traj.len().saturating_sub(1));
    for w in traj.states.windows(2) {
        let (i, j) = (w[0], w[1]);
        if i >= n || j >= n {
            return Err(MarkovError::Index {
                index: i.max(j),
                bound: n,
            });
        }
        let p = (counts.get(i, j) as f64 + prior.alpha[j]) / (row_totals[i] as f64 + total_alpha);
        out.push(-p.ln());
        counts.record(i, j);
        row_totals[i] += 1;
    }
    Ok(out)
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                samples: 0,
            };
        }
        // shifted by the first sample so constant inputs give an exact mean
        let shift = xs[0];
        let mean = shift + xs.iter().map(|x| x - shift).sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr,
            samples: n,
        }
    }
}

/// Expected per-transition loss of the Bayes-optimal predictor on chains of
/// length `len`, estimated over `num_chains` chains. Chain `c` draws its
/// matrix and walk from stream `(seed, BayesChain, c)`.
pub fn bayes_limit_loss(prior: &DirichletPrior, len: usize, num_chains: usize, seed: u64) -> Result<Estimate> {
    if num_chains == 0 {
        return Err(MarkovError::Config("need at least one chain".into()));
    }
    if len < 2 {
        return Err(MarkovError::Config("chains need at least two states".into()));
    }
    let prior = Arc::new(prior.clone());
    let per_chain: Vec<f64> = (0..num_chains)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, Purpose::BayesChain, c as u64);
            let p = sample_transition_matrix(&prior, &mut r);
            let traj = sample_trajectory(&p, len, &mut r)?;
            let nll = bayes_sequential_nll(&traj, &prior)?;
            Ok(nll.iter().sum::<f64>() / nll.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&per_chain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn prior_validation() {
        assert!(DirichletPrior::new(vec![]).is_err());
        assert!(DirichletPrior::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletPrior::new(vec![1.0, f64::NAN]).is_err());
        let p = DirichletPrior::symmetric(4, 0.05).unwrap();
        assert_eq!(p.mean(), vec![0.25; 4]);
    }

    #[test]
    fn single_state_row_is_one() {
        let p = DirichletPrior::symmetric(1, 0.3).unwrap();
        let mut r = stream(0, Purpose::Misc, 0);
        assert_eq!(sample_dirichlet_row(&p, &mut r), vec![1.0]);
        let m = sample_transition_matrix(&Arc::new(p), &mut r);
        assert_eq!(m.row(0), &[1.0]);
    }

    #[test]
    fn huge_concentration_is_near_uniform() {
        let p = DirichletPrior::symmetric(4, 1e6).unwrap();
        let mut r = stream(1, Purpose::Misc, 0);
        for _ in 0..50 {
            for x in sample_dirichlet_row(&p, &mut r) {
                assert!((x - 0.25).abs() < 0.01);
            }
        }
    }

    #[test]
    fn identity_and_cycle_walks() {
        let mut r = stream(2, Purpose::Misc, 0);
        let t = sample_trajectory_from(&TransitionMatrix::identity(5), 3, 10, &mut r).unwrap();
        assert!(t.states.iter().all(|&s| s == 3));
        let t = sample_trajectory_from(&TransitionMatrix::cycle(3), 0, 5, &mut r).unwrap();
        assert_eq!(t.states, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn counting_examples() {
        let c = count_transitions(
            &Trajectory {
                states: vec![0, 1, 0, 1],
            },
            2,
        )
        .unwrap();
        assert_eq!((c.get(0, 1), c.get(1, 0), c.get(0, 0), c.get(1, 1)), (2, 1, 0, 0));
        let c = count_transitions(&Trajectory { states: vec![5, 5, 5] }, 6).unwrap();
        assert_eq!(c.get(5, 5), 2);
        assert_eq!(c.total(), 2);
        assert_eq!(
            count_transitions(&Trajectory { states: vec![0, 7] }, 3),
            Err(MarkovError::Index { index: 7, bound: 3 })
        );
    }

    #[test]
    fn posterior_mean_examples() {
        let prior = DirichletPrior::symmetric(3, 0.05).unwrap();
        let zero = bayes_posterior_mean(&TransitionCounts::zeros(3), &prior).unwrap();
        for i in 0..3 {
            assert_eq!(zero.row(i), prior.mean().as_slice());
        }
        let c = TransitionCounts::from_rows(&[vec![2, 0, 1], vec![0; 3], vec![1_000_000, 0, 0]]);
        let m = bayes_posterior_mean(&c, &prior).unwrap();
        let want = [2.05 / 3.15, 0.05 / 3.15, 1.05 / 3.15];
        for j in 0..3 {
            assert!((m.get(0, j) - want[j]).abs() < 1e-15);
        }
        assert!((m.get(0, 0) - 0.6508).abs() < 1e-4);
        assert!((m.get(0, 1) - 0.0159).abs() < 1e-4);
        assert!((m.get(0, 2) - 0.3333).abs() < 1e-4);
        assert!(m.get(2, 0) > 0.9999);
    }

    #[test]
    fn first_step_loss_is_log_states() {
        let prior = DirichletPrior::symmetric(7, 0.05).unwrap();
        let nll = bayes_sequential_nll(&Trajectory { states: vec![3, 1, 3] }, &prior).unwrap();
        assert!((nll[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_frame_rejects_small_dimension() {
        let mut r = stream(3, Purpose::Misc, 0);
        assert!(matches!(
            sample_orthonormal_reps(5, 4, &mut r),
            Err(MarkovError::Config(_))
        ));
        let one = sample_orthonormal_reps(1, 3, &mut r).unwrap();
        let n: f32 = one.row(0).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
