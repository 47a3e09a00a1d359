use std::sync::Arc;

use mpt_core::markov::*;
use mpt_core::rng::{stream, Purpose};
use proptest::prelude::*;

#[test]
fn dirichlet_component_means_match_prior_mean() {
    let prior = DirichletPrior::symmetric(30, 0.05).unwrap();
    let n = 10_000;
    let mut r = stream(11, Purpose::Misc, 0);
    let mut sums = vec![0.0; 30];
    for _ in 0..n {
        let row = sample_dirichlet_row(&prior, &mut r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p >= 0.0));
        sums.iter_mut().zip(&row).for_each(|(s, p)| *s += p);
    }
    // Var(p_j) = a_j (a0 − a_j) / (a0² (a0 + 1))
    let (a, a0) = (0.05, 1.5);
    let se = (a * (a0 - a) / (a0 * a0 * (a0 + 1.0)) / n as f64).sqrt();
    for s in sums {
        assert!((s / n as f64 - 1.0 / 30.0).abs() < 3.0 * se, "{}", s / n as f64);
    }
}

#[test]
fn gamma_sampler_moments() {
    // Gamma(k, 1) has mean k and variance k; check both branches.
    for (shape, seed) in [(0.05, 1u64), (0.5, 2), (1.0, 3), (4.5, 4)] {
        let mut r = stream(seed, Purpose::Misc, 9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(shape, &mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (shape / n as f64).sqrt();
        assert!((mean - shape).abs() < 4.0 * se, "shape {shape}: mean {mean}");
    }
}

#[test]
fn transition_matrices_are_stochastic_with_prior_mean_rows() {
    let prior = Arc::new(DirichletPrior::symmetric(30, 0.05).unwrap());
    let mut r = stream(12, Purpose::Misc, 0);
    for _ in 0..1_000 {
        let m = sample_transition_matrix(&prior, &mut r);
        for i in 0..30 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let small = Arc::new(DirichletPrior::symmetric(4, 0.05).unwrap());
    let n = 10_000;
    let mut mean = vec![0.0; 16];
    for _ in 0..n {
        let m = sample_transition_matrix(&small, &mut r);
        for i in 0..4 {
            for j in 0..4 {
                mean[i * 4 + j] += m.get(i, j) / n as f64;
            }
        }
    }
    let (a, a0) = (0.05, 0.2);
    let se = (a * (a0 - a) / (a0 * a0 * (a0 + 1.0)) / n as f64).sqrt();
    for v in mean {
        assert!((v - 0.25).abs() < 3.0 * se, "{v}");
    }
}

#[test]
fn empirical_transition_frequencies_converge() {
    let p = TransitionMatrix::from_rows(vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25], vec![0.2, 0.2, 0.6]]).unwrap();
    let mut r = stream(13, Purpose::Misc, 0);
    let traj = sample_trajectory(&p, 100_001, &mut r).unwrap();
    let c = count_transitions(&traj, 3).unwrap();
    for i in 0..3 {
        let n_i: u64 = c.row(i).iter().sum();
        for j in 0..3 {
            let f = c.get(i, j) as f64 / n_i as f64;
            let se = (p.get(i, j) * (1.0 - p.get(i, j)) / n_i as f64).sqrt();
            assert!((f - p.get(i, j)).abs() < 3.0 * se, "({i},{j}) {f}");
        }
    }
}

#[test]
fn start_state_is_uniform() {
    let p = TransitionMatrix::identity(4);
    let mut hist = [0usize; 4];
    for k in 0..4_000 {
        let mut r = stream(14, Purpose::Misc, k);
        hist[sample_trajectory(&p, 2, &mut r).unwrap().states[0]] += 1;
    }
    for h in hist {
        // binomial(4000, 1/4): sd ≈ 27.4
        assert!((h as f64 - 1000.0).abs() < 3.0 * 27.4, "{hist:?}");
    }
}

fn gram_error(reps: &StateRepresentations) -> f64 {
    let n = reps.num_states();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = reps
                .row(i)
                .iter()
                .zip(reps.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

#[test]
fn orthonormal_frames() {
    let mut r = stream(15, Purpose::Misc, 0);
    let square = sample_orthonormal_reps(2, 2, &mut r).unwrap();
    assert!(gram_error(&square) < 1e-6);

    let a = sample_orthonormal_reps(30, 256, &mut stream(1, Purpose::TrainFrame, 0)).unwrap();
    let b = sample_orthonormal_reps(30, 256, &mut stream(2, Purpose::TrainFrame, 0)).unwrap();
    assert!(gram_error(&a) < 1e-5);
    assert!(gram_error(&b) < 1e-5);
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn frames_have_positive_r_diagonal() {
    // With Q from QR(G) and a positive diagonal of R, q_j · g_j > 0.
    use rand::Rng;
    use rand_distr::StandardNormal;
    let (n, d) = (5, 8);
    let reps = sample_orthonormal_reps(n, d, &mut stream(16, Purpose::Misc, 0)).unwrap();
    let mut r = stream(16, Purpose::Misc, 0);
    let g: Vec<f64> = (0..d * n).map(|_| r.sample(StandardNormal)).collect();
    for j in 0..n {
        let dot: f64 = (0..d).map(|i| reps.row(j)[i] as f64 * g[i * n + j]).sum();
        assert!(dot > 0.0);
    }
}

#[test]
fn posterior_mean_rows_are_exact_probability_vectors() {
    let mut r = stream(17, Purpose::Misc, 0);
    use rand::Rng;
    for _ in 0..1_000 {
        let n = r.gen_range(1..12);
        let alpha: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..5.0)).collect();
        let prior = DirichletPrior::new(alpha.clone()).unwrap();
        let rows: Vec<Vec<u64>> = (0..n).map(|_| (0..n).map(|_| r.gen_range(0..50)).collect()).collect();
        let m = bayes_posterior_mean(&TransitionCounts::from_rows(&rows), &prior).unwrap();
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let denom: f64 = rows[i].iter().zip(&alpha).map(|(&c, &a)| c as f64 + a).sum();
            for j in 0..n {
                assert!((m.get(i, j) - (rows[i][j] as f64 + alpha[j]) / denom).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn posterior_mean_converges_to_frequencies() {
    let prior = DirichletPrior::symmetric(3, 0.05).unwrap();
    let base = [3u64, 1, 6];
    let k = 1_000_000;
    let c = TransitionCounts::from_rows(&[base.iter().map(|b| b * k).collect(), vec![0; 3], vec![0; 3]]);
    let m = bayes_posterior_mean(&c, &prior).unwrap();
    for j in 0..3 {
        assert!((m.get(0, j) - base[j] as f64 / 10.0).abs() < 1e-4);
    }
}

#[test]
fn bayes_limit_trivial_cases() {
    let one = DirichletPrior::symmetric(1, 0.05).unwrap();
    let e = bayes_limit_loss(&one, 64, 10, 0).unwrap();
    assert_eq!(e.mean, 0.0);
    assert!(bayes_limit_loss(&one, 64, 0, 0).is_err());
}

#[test]
fn bayes_limit_is_non_increasing_in_length() {
    let prior = DirichletPrior::symmetric(10, 0.05).unwrap();
    let lens = [32, 64, 128, 256];
    let est: Vec<Estimate> = lens
        .iter()
        .map(|&t| bayes_limit_loss(&prior, t, 2_000, 3).unwrap())
        .collect();
    for w in est.windows(2) {
        let tol = 2.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        assert!(w[1].mean <= w[0].mean + tol, "{est:?}");
    }
}

#[test]
fn bayes_limit_agrees_with_independent_python_estimate() {
    // 2,000 chains at |S| = 10, α = 0.05, T = 256 drawn with an unrelated
    // generator (numpy) gave 0.6253 ± 0.0061.
    let prior = DirichletPrior::symmetric(10, 0.05).unwrap();
    let e = bayes_limit_loss(&prior, 256, 2_000, 7).unwrap();
    let tol = 3.0 * (e.stderr.powi(2) + 0.0061f64.powi(2)).sqrt();
    assert!((e.mean - 0.6253).abs() < tol, "{e:?}");
}

#[test]
fn sampling_is_reproducible() {
    let prior = Arc::new(DirichletPrior::symmetric(6, 0.2).unwrap());
    let draw = || {
        let mut r = stream(99, Purpose::TrainTrajectory, 5);
        let m = sample_transition_matrix(&prior, &mut r);
        let t = sample_trajectory(&m, 50, &mut r).unwrap();
        let f = sample_orthonormal_reps(6, 16, &mut stream(99, Purpose::TrainFrame, 5)).unwrap();
        (m, t, f)
    };
    assert_eq!(draw(), draw());
    let prior10 = DirichletPrior::symmetric(10, 0.05).unwrap();
    assert_eq!(
        bayes_limit_loss(&prior10, 64, 100, 1).unwrap(),
        bayes_limit_loss(&prior10, 64, 100, 1).unwrap()
    );
}

proptest! {
    #[test]
    fn counts_total_is_length_minus_one(states in proptest::collection::vec(0usize..6, 1..200)) {
        let n = states.len();
        let c = count_transitions(&Trajectory { states }, 6).unwrap();
        prop_assert_eq!(c.total() as usize, n - 1);
    }

    #[test]
    fn trajectories_have_requested_length_and_valid_states(len in 1usize..300, seed in 0u64..500) {
        let prior = Arc::new(DirichletPrior::symmetric(7, 0.05).unwrap());
        let mut r = stream(seed, Purpose::Misc, 1);
        let m = sample_transition_matrix(&prior, &mut r);
        let t = sample_trajectory(&m, len, &mut r).unwrap();
        prop_assert_eq!(t.len(), len);
        prop_assert!(t.states.iter().all(|&s| s < 7));
    }
}
