use mpt_core::checkpoint::Checkpoint;
use mpt_core::model::{Bound, ModelConfig, Params};
use mpt_core::pretrain::Backbone;
use mpt_core::rec::*;
use mpt_core::rng::{stream, Purpose};
use mpt_core::tensor::{gradient_check_many, Tape, Tensor};
use proptest::prelude::*;

fn tiny_backbone() -> Backbone {
    let mut cfg = ModelConfig::with_dims(1, 16, 2);
    cfg.max_seq_len = 64;
    Backbone::init(cfg, 2).unwrap()
}

fn tiny_synth(seed: u64) -> (InteractionDataset, GroundTruth) {
    generate_synthetic_dataset(&SynthConfig {
        num_users: 40,
        num_items: 30,
        alpha: 0.01,
        min_len: 5,
        max_len: 12,
        d_text: 8,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick_finetune(mode: FinetuneMode, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        mode,
        max_len: 16,
        lora: mpt_core::model::LoraConfig {
            rank: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn dataset_files_round_trip_in_text_and_binary_form() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = tiny_synth(1);
    for emb in ["emb.txt", "emb.mpt"] {
        let (s, e) = (dir.path().join("seq.txt"), dir.path().join(emb));
        ds.write(&s, &e).unwrap();
        let back = load_dataset(&s, &e).unwrap();
        assert_eq!(back.sequences, ds.sequences);
        assert_eq!(back.embeddings, ds.embeddings, "{emb}");
    }
    let bin = std::fs::read(dir.path().join("emb.mpt")).unwrap();
    assert_eq!(&bin[..4], b"MPT1");
}

#[test]
fn loader_reports_line_numbers_and_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let (s, e) = (dir.path().join("seq.txt"), dir.path().join("emb.txt"));
    std::fs::write(&e, "3 2\n1 0\n0 1\n1 1\n").unwrap();
    std::fs::write(&s, "# users\n0 1 2\n\n2 1 7\n").unwrap();
    match load_dataset(&s, &e) {
        Err(RecError::Format { line, msg }) => {
            assert_eq!(line, 4);
            assert!(msg.contains('7'));
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&s, "\n# nothing\n").unwrap();
    assert!(matches!(load_dataset(&s, &e), Err(RecError::NoUsers)));
    std::fs::write(&s, "0 1 2\n").unwrap();
    assert!(matches!(
        load_dataset(&s, &dir.path().join("absent.txt")),
        Err(RecError::Io { .. })
    ));
}

#[test]
fn leave_one_out_views() {
    let emb = Tensor::full(&[10, 2], 1.0);
    let ds = InteractionDataset::new(vec![vec![1, 2, 3, 4, 5], vec![6, 7], vec![7, 8, 9]], emb).unwrap();
    let split = leave_one_out_split(&ds);
    assert_eq!(split.excluded, 1);
    assert_eq!(split.users.len(), 2);
    let u = &split.users[0];
    assert_eq!(u.train(), &[1, 2, 3]);
    assert_eq!(u.valid_context(), &[1, 2, 3]);
    assert_eq!(u.valid_target(), 4);
    assert_eq!(u.test_context(), &[1, 2, 3, 4]);
    assert_eq!(u.test_target(), 5);
    assert_eq!(split.users[1].user, 2);
    assert_eq!(split.users[1].train(), &[7]);
}

fn brute_force_rank(scores: &[f32], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

proptest! {
    #[test]
    fn ranking_matches_a_full_sort(
        scores in proptest::collection::vec(prop_oneof![(-3i32..3).prop_map(|v| v as f32), -5.0f32..5.0], 1..40),
        pick in any::<prop::sample::Index>(),
        n in 1usize..30,
    ) {
        let target = pick.index(scores.len());
        let rank = rank_of_target(&scores, target);
        prop_assert_eq!(rank, brute_force_rank(&scores, target));
        let hit = rank <= n;
        prop_assert_eq!(hr_at(rank, n), if hit { 1.0 } else { 0.0 });
        prop_assert_eq!(ndcg_at(rank, n), if hit { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 });
    }

    #[test]
    fn shuffles_are_permutations(seq in proptest::collection::vec(0usize..50, 1..30), seed in any::<u64>()) {
        let mut r = stream(seed, Purpose::Shuffle, 0);
        for mode in ShuffleMode::ALL {
            let out = shuffle_sequence(&seq, mode, &mut r);
            let (mut a, mut b) = (seq.clone(), out.clone());
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            match mode {
                ShuffleMode::Chronological => prop_assert_eq!(&out, &seq),
                ShuffleMode::Partial => prop_assert_eq!(out.last(), seq.last()),
                ShuffleMode::Complete => {}
            }
        }
    }
}

#[test]
fn ties_break_toward_the_smaller_index() {
    let s = [1.0, 2.0, 2.0, 2.0, 0.5];
    assert_eq!(rank_of_target(&s, 1), 1);
    assert_eq!(rank_of_target(&s, 3), 3);
    assert_eq!(rank_of_target(&s, 4), 5);
}

#[test]
fn cosine_scores_match_explicit_formula() {
    let hidden = Tensor::<f64>::hashed(&[3, 5], 1, 1.0);
    let mut items_data = Tensor::<f64>::hashed(&[4, 5], 2, 1.0).into_data();
    items_data[10..15].iter_mut().for_each(|v| *v = 0.0);
    let items = Tensor::new(vec![4, 5], items_data).unwrap();
    let mut tape = Tape::<f64>::new();
    let (h, v) = (tape.constant(hidden.clone()), tape.constant(items.clone()));
    let s = score_items(&mut tape, h, v, 0.07).unwrap();
    let got = tape.value(s);
    for i in 0..3 {
        for j in 0..4 {
            let (a, b) = (hidden.row(i), items.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want = if nb == 0.0 { 0.0 } else { dot / (na * nb) / 0.07 };
            assert!((got.get(&[i, j]) - want).abs() < 1e-12, "{i} {j}");
        }
    }
    let h32: Vec<f32> = hidden.row(0).iter().map(|&x| x as f32).collect();
    let direct = score_vector(&h32, &items.cast(), 0.07);
    assert_eq!(direct[2], 0.0);
    for j in 0..4 {
        assert!((direct[j] as f64 - got.get(&[0, j])).abs() < 1e-4);
    }
}

#[test]
fn adaptor_and_scoring_pass_gradient_check() {
    let p: Params<f64> = init_adaptor(6, 5, 4, 3).cast();
    let names: Vec<String> = p.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = p.iter().map(|(_, t)| t.clone()).collect();
    inputs[0] = Tensor::hashed(&[6], 9, 1.0);
    inputs.push(Tensor::hashed(&[7, 6], 4, 1.0));
    inputs.push(Tensor::hashed(&[3, 4], 5, 1.0));
    let f = |tape: &mut Tape<f64>, v: &[mpt_core::tensor::Var]| {
        let w = Bound::from_vars(names.iter().cloned().zip(v[..5].iter().copied()));
        let items = adaptor_forward(tape, &w, v[5]).unwrap();
        let s = score_items(tape, v[6], items, 0.5).unwrap();
        tape.cross_entropy(s, &[Some(1), None, Some(6)])
    };
    let r = gradient_check_many(f, &inputs, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn adaptor_rejects_wrong_embedding_width() {
    let p = init_adaptor(6, 5, 4, 0);
    let mut tape = Tape::new();
    let w = Bound::new(&mut tape, &p, false);
    let x = tape.constant(Tensor::full(&[2, 7], 1.0));
    assert!(matches!(adaptor_forward(&mut tape, &w, x), Err(RecError::Dimension(_))));
}

#[test]
fn adaptor_init_is_seeded_and_bounded() {
    let a = init_adaptor(8, 16, 16, 5);
    assert_eq!(a, init_adaptor(8, 16, 16, 5));
    assert_ne!(a, init_adaptor(8, 16, 16, 6));
    let bound = 1.0 / 8f32.sqrt();
    assert!(a.get("adaptor.w1").unwrap().data().iter().all(|v| v.abs() <= bound));
    assert!(a.get("adaptor.b1").unwrap().data().iter().all(|v| v.abs() <= bound));
    assert!(a.get("adaptor.w2").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    assert!(a.get("adaptor.norm").unwrap().data().iter().all(|&v| v == 1.0));
}

struct TargetOracle<'a>(&'a LeaveOneOut<'a>, usize);

impl ItemScorer for TargetOracle<'_> {
    fn score_batch(&self, users: &[usize], _contexts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        Ok(users
            .iter()
            .map(|&u| {
                let target = self.0.users.iter().find(|s| s.user == u).unwrap().test_target();
                (0..self.1).map(|v| if v == target { 1.0 } else { 0.0 }).collect()
            })
            .collect())
    }
}

#[test]
fn perfect_scorer_hits_every_target() {
    let (ds, _) = tiny_synth(3);
    let split = leave_one_out_split(&ds);
    let report = evaluate_rec(&TargetOracle(&split, ds.num_items()), &split, &EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 9);
    for r in &report.rows {
        assert_eq!(r.hr, 1.0);
        assert_eq!(r.ndcg, 1.0);
        assert_eq!(r.users, 40);
    }
}

#[test]
fn popularity_counts_training_views_only() {
    let emb = Tensor::full(&[5, 2], 1.0);
    let ds = InteractionDataset::new(vec![vec![0, 1, 4, 4], vec![1, 2, 4, 4]], emb).unwrap();
    let split = leave_one_out_split(&ds);
    let pop = popularity_baseline(&split, 5);
    assert_eq!(pop.counts, vec![1.0, 2.0, 1.0, 0.0, 0.0]);
}

#[test]
fn report_mirrors_agree() {
    let (ds, truth) = tiny_synth(4);
    let split = leave_one_out_split(&ds);
    let r = evaluate_rec(&OracleScorer { truth: &truth }, &split, &EvalOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path(), "rec").unwrap();
    let csv_text = std::fs::read_to_string(dir.path().join("rec.csv")).unwrap();
    assert!(csv_text.starts_with("mode,N,hr,ndcg,users,seed\n"));
    let rows: Vec<RecRow> = csv::Reader::from_reader(csv_text.as_bytes())
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows, r.rows);
    let json: RecEvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rec.json")).unwrap()).unwrap();
    assert_eq!(json, r);
}

#[test]
fn synthetic_generator_is_seeded_and_consistent() {
    let (a, ga) = tiny_synth(7);
    let (b, gb) = tiny_synth(7);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert_ne!(a, tiny_synth(8).0);
    assert_eq!(ga.chains.len(), 3);
    for (u, seq) in a.sequences.iter().enumerate() {
        assert!((5..=12).contains(&seq.len()));
        let p = &ga.chains[ga.user_chain[u]];
        assert!(seq.windows(2).all(|w| p.get(w[0], w[1]) > 0.0));
    }
    for i in 0..a.num_items() {
        let n: f32 = a.embeddings.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert!(generate_synthetic_dataset(&SynthConfig {
        num_items: MAX_SYNTH_ITEMS + 1,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn adaptor_only_finetuning_freezes_the_backbone() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(5);
    let cfg = quick_finetune(FinetuneMode::AdaptorOnly, 3);
    let model = RecModel::new(backbone.clone(), &cfg, ds.text_dim()).unwrap();

    let mut tape = Tape::new();
    let bb = Bound::new(&mut tape, &model.backbone.params, false);
    let ab = Bound::new(&mut tape, &model.adaptor, true);
    let emb = tape.constant(ds.embeddings.clone());
    let seqs: Vec<&[usize]> = ds.sequences.iter().map(Vec::as_slice).collect();
    let mut r = stream(0, Purpose::Dropout, 0);
    let loss = nip_loss(&mut tape, &model, &ab, &bb, None, emb, &seqs, Some(&mut r), 0.2).unwrap();
    tape.backward(loss).unwrap();
    for (name, v) in bb.iter() {
        assert!(tape.grad(*v).is_none(), "{name}");
    }
    for (name, v) in ab.iter() {
        assert!(tape.grad(*v).unwrap().iter().any(|&g| g != 0.0), "{name}");
    }

    let out = finetune_run(&backbone, &ds, &cfg).unwrap();
    assert_eq!(out.model.backbone, backbone);
    assert!(out.model.lora.is_none());
    assert!(out.curve.len() <= 3);
}

#[test]
fn lora_finetuning_keeps_base_weights_bit_identical() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(6);
    let cfg = FinetuneConfig {
        lr: 1e-2,
        ..quick_finetune(FinetuneMode::AdaptorPlusLora, 3)
    };
    let out = finetune_run(&backbone, &ds, &cfg).unwrap();
    for ((n, a), (_, b)) in out.model.backbone.params.iter().zip(backbone.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n}");
    }
    if out.best_epoch > 0 {
        let (lora, _) = out.model.lora.as_ref().unwrap();
        let b_moved = lora
            .iter()
            .any(|(n, t)| n.ends_with(".b") && t.data().iter().any(|&v| v != 0.0));
        assert!(b_moved);
    }
}

#[test]
fn zero_epochs_return_the_initialized_adaptor() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(5);
    let cfg = quick_finetune(FinetuneMode::AdaptorOnly, 0);
    let out = finetune_run(&backbone, &ds, &cfg).unwrap();
    assert!(out.curve.is_empty());
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.model.adaptor, init_adaptor(8, 16, 16, cfg.seed));
}

#[test]
fn finetuning_improves_validation_ranking_and_is_reproducible() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(9);
    let cfg = FinetuneConfig {
        lr: 3e-3,
        patience: 100,
        ..quick_finetune(FinetuneMode::AdaptorOnly, 15)
    };
    let a = finetune_run(&backbone, &ds, &cfg).unwrap();
    let b = finetune_run(&backbone, &ds, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model, b.model);
    let first = a.curve[0].train_loss;
    let last = a.curve.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(a.best_valid_ndcg10 >= a.curve[0].valid_ndcg10);

    let split = leave_one_out_split(&ds);
    let opts = EvalOptions {
        max_len: 16,
        seed: 3,
        ..Default::default()
    };
    let ra = evaluate_rec(&MptScorer::new(&a.model, &ds.embeddings).unwrap(), &split, &opts).unwrap();
    let rb = evaluate_rec(&MptScorer::new(&b.model, &ds.embeddings).unwrap(), &split, &opts).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn rec_model_checkpoint_reproduces_scores() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(2);
    let cfg = quick_finetune(FinetuneMode::AdaptorPlusLora, 1);
    let model = finetune_run(&backbone, &ds, &cfg).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.mpt");
    model.to_checkpoint(1).save(&path).unwrap();
    let back = RecModel::from_checkpoints(backbone.clone(), &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back, model);
    let ctx = vec![ds.sequences[0].clone(), ds.sequences[1][..3].to_vec()];
    let s1 = MptScorer::new(&model, &ds.embeddings)
        .unwrap()
        .score_batch(&[0, 1], &ctx)
        .unwrap();
    let s2 = MptScorer::new(&back, &ds.embeddings)
        .unwrap()
        .score_batch(&[0, 1], &ctx)
        .unwrap();
    assert_eq!(s1, s2);

    let mut other = ModelConfig::with_dims(1, 32, 2);
    other.max_seq_len = 64;
    let wrong = Backbone::init(other, 0).unwrap();
    assert!(RecModel::from_checkpoints(wrong, &Checkpoint::load(&path).unwrap()).is_err());
}

#[test]
fn batched_scores_do_not_depend_on_padding() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(2);
    let model = RecModel::new(backbone, &quick_finetune(FinetuneMode::AdaptorOnly, 0), 8).unwrap();
    let scorer = MptScorer::new(&model, &ds.embeddings).unwrap();
    let short = ds.sequences[0][..2].to_vec();
    let long = ds.sequences[1].clone();
    let alone = scorer.score_batch(&[0], std::slice::from_ref(&short)).unwrap();
    let together = scorer.score_batch(&[0, 1], &[short, long]).unwrap();
    for (a, b) in alone[0].iter().zip(&together[0]) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn attention_dump_is_causal_and_row_stochastic() {
    let backbone = tiny_backbone();
    let (ds, _) = tiny_synth(2);
    let model = RecModel::new(backbone, &quick_finetune(FinetuneMode::AdaptorOnly, 0), 8).unwrap();
    let seq = ds.sequences[0][..5].to_vec();
    let dump = dump_attention(&model, &ds.embeddings, &seq).unwrap();
    assert_eq!(dump.attention.len(), 1);
    assert_eq!(dump.attention[0].len(), 2);
    for head in &dump.attention[0] {
        for (i, row) in head.iter().enumerate() {
            assert_eq!(row.len(), 5);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
    assert!(dump_attention(&model, &ds.embeddings, &[]).is_err());
    assert!(dump_attention(&model, &ds.embeddings, &[0; 17]).is_err());
    assert!(dump_attention(&model, &ds.embeddings, &[99]).is_err());
}

#[test]
fn finetune_config_is_validated() {
    let backbone = tiny_backbone();
    let ok = FinetuneConfig::default();
    assert!(FinetuneConfig {
        max_len: 65,
        ..ok.clone()
    }
    .validate(&backbone)
    .is_err());
    assert!(FinetuneConfig {
        temperature: 0.0,
        ..ok.clone()
    }
    .validate(&backbone)
    .is_err());
    assert!(FinetuneConfig {
        dropout: 1.0,
        ..ok.clone()
    }
    .validate(&backbone)
    .is_err());
    assert!(ok.validate(&backbone).is_ok());
    let err = unknown_field_error();
    assert!(err.contains("unknown field"), "{err}");
}

fn unknown_field_error() -> String {
    serde_json::from_str::<FinetuneConfig>(r#"{"lr": 0.1, "learning_rate": 0.2}"#)
        .unwrap_err()
        .to_string()
}

#[test]
fn partial_shuffle_keeps_the_last_item_on_every_draw() {
    let seq: Vec<usize> = (0..8).collect();
    let mut r = stream(11, Purpose::Shuffle, 0);
    let mut moved = 0;
    for _ in 0..2_000 {
        let s = shuffle_sequence(&seq, ShuffleMode::Partial, &mut r);
        assert_eq!(s[7], 7);
        moved += usize::from(s != seq);
    }
    assert!(moved > 1_900);
}
