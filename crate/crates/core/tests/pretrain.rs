use mpt_core::checkpoint::Checkpoint;
use mpt_core::model::{Bound, ModelConfig};
use mpt_core::pretrain::*;
use mpt_core::tensor::{clip_grad_norm, AdamW, AdamWConfig, Tape};
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::with_dims(2, 32, 2);
    m.max_seq_len = 256;
    m
}

fn cfg(num_states: usize, seq_len: usize, batch: usize) -> PretrainConfig {
    PretrainConfig {
        num_states,
        seq_len,
        batch_size: batch,
        lr: 1e-3,
        eval_every: 50,
        eval_batches: 2,
        bayes_chains: 200,
        ..PretrainConfig::desk()
    }
}

#[test]
fn batches_are_lookups_into_fresh_frames() {
    let c = cfg(6, 20, 4);
    let a = sample_batch(&c, 16, Split::Train, 0).unwrap();
    let b = sample_batch(&c, 16, Split::Train, 4).unwrap();
    assert_eq!(a.inputs.shape(), &[4, 20, 16]);
    assert_eq!(a.reps.shape(), &[4, 6, 16]);
    assert_ne!(a.reps.row(0), b.reps.row(0));
    for (k, traj) in a.trajectories.iter().enumerate() {
        for t in 0..20 {
            let s = traj.states[t];
            assert_eq!(a.inputs.row(k * 20 + t), a.reps.row(k * 6 + s));
            let want = (t + 1 < 20).then(|| traj.states[t + 1]);
            assert_eq!(a.targets[k * 20 + t], want);
        }
    }
    assert_eq!(a, sample_batch(&c, 16, Split::Train, 0).unwrap());
    assert_ne!(a.reps, sample_batch(&c, 16, Split::Eval, 0).unwrap().reps);
    assert!(matches!(
        sample_batch(&c, 4, Split::Train, 0),
        Err(PretrainError::Config(_))
    ));
}

#[test]
fn untrained_loss_matches_residual_identity_oracle() {
    // At init the blocks barely touch the residual stream, so the final
    // RMSNorm output is close to sqrt(d) times the current input vector and
    // the logits are about sqrt(d) on the current state and 0 elsewhere.
    let mut model = ModelConfig::with_dims(2, 64, 2);
    model.max_seq_len = 256;
    let c = cfg(30, 128, 8);
    let batch = sample_batch(&c, 64, Split::Eval, 0).unwrap();
    let backbone = Backbone::init(model, 3).unwrap();
    let got = backbone.trajectory_nll(&batch).unwrap();
    let scale = 8.0f64;
    let lse = (scale.exp() + 29.0).ln();
    for (k, traj) in batch.trajectories.iter().enumerate() {
        let oracle: f64 = traj
            .states
            .windows(2)
            .map(|w| if w[0] == w[1] { lse - scale } else { lse })
            .sum::<f64>()
            / 127.0;
        assert!((got[k] - oracle).abs() < 0.2, "{} vs {oracle}", got[k]);
    }
}

#[test]
fn single_state_loss_is_zero_after_one_step() {
    let c = PretrainConfig {
        total_tokens: 1,
        ..cfg(1, 16, 2)
    };
    let out = pretrain_run(&tiny_model(), &c, None, None).unwrap();
    assert_eq!(out.steps, 1);
    let r = &out.report.records[0];
    assert_eq!(r.eval_loss, 0.0);
    assert_eq!(r.bayes_limit, 0.0);
}

#[test]
fn loss_decreases_on_small_run() {
    let c = PretrainConfig {
        total_tokens: 200 * 16 * 63,
        eval_every: 200,
        ..cfg(5, 64, 16)
    };
    let model = tiny_model();
    let mut backbone = Backbone::init(model.clone(), c.seed).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        lr: c.lr,
        ..Default::default()
    });
    let mut losses = Vec::new();
    for step in 0..200u64 {
        let batch = sample_batch(&c, 32, Split::Train, step * 16).unwrap();
        losses.push(train_step(&mut backbone, &mut opt, &batch, 1.0).unwrap());
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn zero_learning_rate_leaves_weights_and_loss_unchanged() {
    let c = cfg(5, 32, 4);
    let mut backbone = Backbone::init(tiny_model(), 1).unwrap();
    let before = backbone.params.clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.0,
        ..Default::default()
    });
    let batch = sample_batch(&c, 32, Split::Train, 0).unwrap();
    let losses: Vec<f64> = (0..3)
        .map(|_| train_step(&mut backbone, &mut opt, &batch, 1.0).unwrap())
        .collect();
    assert_eq!(losses[0], losses[1]);
    assert_eq!(losses[1], losses[2]);
    assert_eq!(backbone.params, before);
}

#[test]
fn zero_token_budget_returns_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let c = PretrainConfig {
        total_tokens: 0,
        ..cfg(5, 32, 4)
    };
    let out = pretrain_run(&tiny_model(), &c, None, Some(dir.path())).unwrap();
    assert!(out.report.records.is_empty());
    assert_eq!(out.steps, 0);
    let init = Backbone::init(tiny_model(), c.seed).unwrap();
    assert_eq!(out.backbone, init);
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(Backbone::from_checkpoint(&ck).unwrap(), init);
}

#[test]
fn reports_are_reproducible_with_exact_token_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let c = PretrainConfig {
        total_tokens: 10 * 4 * 31,
        eval_every: 4,
        eval_tokens: vec![1, 3 * 4 * 31],
        ..cfg(5, 32, 4)
    };
    let a = pretrain_run(&tiny_model(), &c, None, Some(dir.path())).unwrap();
    let b = pretrain_run(&tiny_model(), &c, None, None).unwrap();
    assert!(a.report.same_results(&b.report));
    assert_eq!(a.backbone, b.backbone);
    let steps: Vec<usize> = a.report.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 3, 4, 8, 10]);
    for r in &a.report.records {
        assert_eq!(r.tokens, r.step as u64 * 4 * 31);
    }
    assert!(a.report.records.windows(2).all(|w| w[0].tokens < w[1].tokens));

    // CSV and JSON mirrors carry the same numbers
    let csv_text = std::fs::read_to_string(dir.path().join("train_report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<EvalRecord> = rdr.deserialize().map(Result::unwrap).collect();
    let json: TrainReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train_report.json")).unwrap()).unwrap();
    assert_eq!(rows, json.records);
    assert_eq!(json, a.report);
}

#[test]
fn uniform_stub_scores_log_states() {
    let c = cfg(7, 40, 4);
    let ev = evaluate_nsp(&UniformPredictor, &c, 16, 3, 0).unwrap();
    assert_eq!(ev.loss.mean, 7f64.ln());
    assert_eq!(ev.loss.samples, 12);
    assert!(ev.gap.mean > 0.0);
}

#[test]
fn trained_model_stays_above_the_bayes_estimator() {
    let c = PretrainConfig {
        total_tokens: 60 * 8 * 63,
        eval_every: 1_000,
        ..cfg(5, 64, 8)
    };
    let out = pretrain_run(&tiny_model(), &c, None, None).unwrap();
    let ev = evaluate_nsp(&out.backbone, &c, 32, 8, 99).unwrap();
    assert!(ev.gap.mean > -2.0 * ev.gap.stderr, "{ev:?}");
    assert!(ev.loss.mean >= ev.bayes.mean - 2.0 * (ev.loss.stderr.powi(2) + ev.bayes.stderr.powi(2)).sqrt());
}

#[test]
fn longer_context_lowers_per_token_loss() {
    let c = PretrainConfig {
        total_tokens: 120 * 8 * 255,
        eval_every: 1_000,
        ..cfg(5, 256, 8)
    };
    let out = pretrain_run(&tiny_model(), &c, None, None).unwrap();
    let long = evaluate_nsp(&out.backbone, &c, 32, 8, 7).unwrap();
    let short_cfg = PretrainConfig { seq_len: 64, ..c };
    let short = evaluate_nsp(&out.backbone, &short_cfg, 32, 8, 7).unwrap();
    assert!(long.loss.mean < short.loss.mean, "{long:?} vs {short:?}");
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = PretrainConfig {
        total_tokens: 20 * 4 * 31,
        eval_every: 1,
        lr: 1e30,
        weight_decay: 0.0,
        ..cfg(5, 32, 4)
    };
    match pretrain_run(&tiny_model(), &c, None, Some(dir.path())) {
        Err(PretrainError::Diverged {
            step,
            last_good,
            report,
            ..
        }) => {
            let ck = Checkpoint::load(&last_good.unwrap()).unwrap();
            assert!((ck.step as usize) < step);
            assert_eq!(report.records.len(), ck.step as usize);
            assert!(ck.tensors.all_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn configuration_is_validated() {
    let m = tiny_model();
    assert!(PretrainConfig::desk()
        .validate(&ModelConfig::with_dims(2, 64, 2))
        .is_ok());
    let too_many = cfg(33, 32, 4);
    assert!(too_many.validate(&m).is_err());
    let too_long = cfg(5, 257, 4);
    assert!(too_long.validate(&m).is_err());
    let d = PretrainConfig::desk();
    assert_eq!(d.tokens_per_step(), 32 * 255);
    assert_eq!(d.num_steps(), 246);
}

#[test]
fn backbone_gradients_reach_every_parameter() {
    let c = cfg(5, 16, 2);
    let backbone = Backbone::init(tiny_model(), 0).unwrap();
    let batch = sample_batch(&c, 32, Split::Train, 0).unwrap();
    let mut tape = Tape::new();
    let w = Bound::new(&mut tape, &backbone.params, true);
    let (loss, _) = nsp_loss(&mut tape, &backbone.config, &w, &batch).unwrap();
    tape.backward(loss).unwrap();
    for (name, v) in w.iter() {
        let g = tape.grad(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&x| x != 0.0), "{name}");
    }
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(
        a in proptest::collection::vec(-100.0f32..100.0, 1..50),
        b in proptest::collection::vec(-100.0f32..100.0, 1..50),
        max in 0.01f64..10.0,
    ) {
        let (mut a, mut b) = (a, b);
        let before = clip_grad_norm(&mut [&mut a, &mut b], max);
        let after: f64 = a.iter().chain(&b).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-6 * max.max(1.0) + 1e-6);
        if before <= max {
            prop_assert!((after - before).abs() < 1e-4 * before.max(1.0));
        }
    }
}
