use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpt_core::checkpoint::Checkpoint;
use mpt_core::markov::{bayes_limit_loss, TransitionMatrix};
use mpt_core::pretrain::{evaluate_nsp, pretrain_run, Backbone, PretrainError};
use mpt_core::rec::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::Exit;

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!(Exit::missing(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let path = cfg.require(&cfg.paths.checkpoint, "--checkpoint")?;
    let ck = load_checkpoint(&path)?;
    Backbone::from_checkpoint(&ck).map_err(|e| Exit::mismatch(format!("{}: {e}", path.display())).into())
}

fn load_rec_model(cfg: &RunConfig) -> Result<RecModel> {
    let backbone = load_backbone(cfg)?;
    let path = cfg.require(&cfg.paths.head, "--head")?;
    let head = load_checkpoint(&path)?;
    RecModel::from_checkpoints(backbone, &head).with_context(|| format!("loading {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> Result<InteractionDataset> {
    let seqs = cfg.require(&cfg.paths.sequences, "--sequences")?;
    let emb = cfg.require(&cfg.paths.embeddings, "--embeddings")?;
    Ok(load_dataset(&seqs, &emb)?)
}

fn report_with_config<T: Serialize>(cfg: &RunConfig, body: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(body).expect("report serializes");
    if let Some(map) = v.as_object_mut() {
        map.insert("config".into(), cfg.to_json());
    }
    v
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model.to_config()?;
    cfg.pretrain.validate(&model)?;
    let init = match &cfg.paths.init {
        Some(p) => {
            let b = Backbone::from_checkpoint(&load_checkpoint(p)?)
                .map_err(|e| Exit::mismatch(format!("{}: {e}", p.display())))?;
            if b.config != model {
                bail!(Exit::mismatch(format!(
                    "{} was trained with a different model configuration",
                    p.display()
                )));
            }
            Some(b)
        }
        None => None,
    };
    let out = match pretrain_run(&model, &cfg.pretrain, init, Some(&cfg.out_dir)) {
        Ok(o) => o,
        Err(PretrainError::Diverged {
            step,
            reason,
            last_good,
            report,
        }) => {
            write_json(&cfg.out_dir, "train_report.json", &report_with_config(cfg, &report))?;
            let kept = last_good.map_or("none".to_string(), |p| p.display().to_string());
            bail!(Exit::diverged(format!(
                "diverged at step {step}: {reason}; last good checkpoint: {kept}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&cfg.out_dir, "train_report.json", &report_with_config(cfg, &out.report))?;
    println!(
        "steps {} tokens {}",
        out.steps,
        out.steps as u64 * cfg.pretrain.tokens_per_step()
    );
    if let Some(r) = out.report.records.last() {
        println!(
            "eval loss {:.6} ± {:.6}  bayes limit {:.6} ± {:.6}  gap {:.6} ± {:.6}",
            r.eval_loss, r.eval_stderr, r.bayes_limit, r.bayes_stderr, r.gap, r.gap_stderr
        );
    }
    println!(
        "checkpoint {}",
        cfg.out_dir.join(mpt_core::pretrain::CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn bayes_limit(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.pretrain;
    let prior = p.prior()?;
    let est = bayes_limit_loss(&prior, p.seq_len, p.bayes_chains, p.seed)?;
    println!("mean {:.6} stderr {:.6}", est.mean, est.stderr);
    let body = json!({
        "num_states": p.num_states,
        "alpha": p.alpha,
        "seq_len": p.seq_len,
        "chains": p.bayes_chains,
        "seed": p.seed,
        "mean": est.mean,
        "stderr": est.stderr,
        "samples": est.samples,
    });
    write_json(&cfg.out_dir, "bayes_limit.json", &report_with_config(cfg, &body))?;
    Ok(())
}

pub fn eval_nsp(cfg: &RunConfig) -> Result<()> {
    let backbone = load_backbone(cfg)?;
    cfg.pretrain
        .validate(&backbone.config)
        .map_err(|e| Exit::mismatch(e.to_string()))?;
    let ev = evaluate_nsp(
        &backbone,
        &cfg.pretrain,
        backbone.config.hidden_dim,
        cfg.pretrain.eval_batches,
        cfg.eval.index_base,
    )?;
    println!(
        "loss {:.6} ± {:.6}  bayes limit {:.6} ± {:.6}  gap {:.6} ± {:.6}",
        ev.loss.mean, ev.loss.stderr, ev.bayes.mean, ev.bayes.stderr, ev.gap.mean, ev.gap.stderr
    );
    let body = json!({"loss": ev.loss, "bayes": ev.bayes, "gap": ev.gap});
    write_json(&cfg.out_dir, "eval_nsp.json", &report_with_config(cfg, &body))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    user_chain: Vec<usize>,
    chains: Vec<Vec<Vec<f64>>>,
}

fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: GroundTruthFile =
        serde_json::from_str(&text).map_err(|e| Exit::mismatch(format!("{}: {e}", path.display())))?;
    let chains = f
        .chains
        .into_iter()
        .map(TransitionMatrix::from_rows)
        .collect::<Result<_, _>>()
        .map_err(|e| Exit::mismatch(format!("{}: {e}", path.display())))?;
    Ok(GroundTruth {
        chains,
        user_chain: f.user_chain,
    })
}

pub fn gen_synth(cfg: &RunConfig, binary: bool) -> Result<()> {
    let (ds, truth) = generate_synthetic_dataset(&cfg.synth)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let emb_name = if binary { "embeddings.mpt" } else { "embeddings.txt" };
    ds.write(&dir.join("sequences.txt"), &dir.join(emb_name))?;
    let n = cfg.synth.num_items;
    let gt = GroundTruthFile {
        user_chain: truth.user_chain.clone(),
        chains: truth
            .chains
            .iter()
            .map(|p| (0..n).map(|i| p.row(i).to_vec()).collect())
            .collect(),
    };
    write_json(dir, "ground_truth.json", &serde_json::to_value(&gt)?)?;

    let split = leave_one_out_split(&ds);
    let opts = EvalOptions {
        modes: vec![ShuffleMode::Chronological],
        ..Default::default()
    };
    let oracle = evaluate_rec(&OracleScorer { truth: &truth }, &split, &opts)?;
    let pop = evaluate_rec(&popularity_baseline(&split, n), &split, &opts)?;
    let summary = json!({
        "users": ds.num_users(),
        "items": n,
        "excluded_users": split.excluded,
        "oracle": oracle.rows,
        "popularity": pop.rows,
    });
    write_json(dir, "gen_synth.json", &report_with_config(cfg, &summary))?;
    let ndcg = |r: &RecEvalReport| r.get(ShuffleMode::Chronological, 10).map_or(0.0, |x| x.ndcg);
    println!(
        "{} users, {} items; test NDCG@10 oracle {:.4} popularity {:.4}",
        ds.num_users(),
        n,
        ndcg(&oracle),
        ndcg(&pop)
    );
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let backbone = load_backbone(cfg)?;
    let ds = load_data(cfg)?;
    let out = finetune_run(&backbone, &ds, &cfg.finetune)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let head = dir.join("head.mpt");
    out.model.to_checkpoint(out.best_epoch as u64).save(&head)?;
    let body = json!({
        "best_epoch": out.best_epoch,
        "best_valid_ndcg10": out.best_valid_ndcg10,
        "stop": out.stop,
        "curve": out.curve,
    });
    write_json(dir, "finetune_report.json", &report_with_config(cfg, &body))?;
    println!(
        "best epoch {} valid NDCG@10 {:.4}; head {}",
        out.best_epoch,
        out.best_valid_ndcg10,
        head.display()
    );
    if let StopReason::Diverged { epoch, reason } = &out.stop {
        bail!(Exit::diverged(format!(
            "diverged in epoch {epoch}: {reason}; kept epoch {}",
            out.best_epoch
        )));
    }
    Ok(())
}

pub fn eval_rec(cfg: &RunConfig, stem: &str, force_modes: Option<Vec<ShuffleMode>>) -> Result<()> {
    let ds = load_data(cfg)?;
    let split = leave_one_out_split(&ds);
    let e = &cfg.eval;
    let mut opts = EvalOptions {
        target: if e.target == "valid" {
            Target::Valid
        } else {
            Target::Test
        },
        modes: force_modes.unwrap_or_else(|| e.modes.clone()),
        cutoffs: e.cutoffs.clone(),
        max_len: e.max_len.unwrap_or(cfg.finetune.max_len),
        seed: e.seed,
        batch_size: e.batch_size,
    };
    let mut report = match e.scorer.as_str() {
        "popularity" => evaluate_rec(&popularity_baseline(&split, ds.num_items()), &split, &opts)?,
        "oracle" => {
            let path = cfg.require(&cfg.paths.ground_truth, "--ground-truth")?;
            let truth = load_ground_truth(&path)?;
            if truth.user_chain.len() != ds.num_users() {
                bail!(Exit::mismatch("ground truth does not match the sequences file"));
            }
            evaluate_rec(&OracleScorer { truth: &truth }, &split, &opts)?
        }
        _ => {
            let model = load_rec_model(cfg)?;
            if model.text_dim() != ds.text_dim() {
                bail!(Exit::mismatch(format!(
                    "embeddings have width {}, the adaptor expects {}",
                    ds.text_dim(),
                    model.text_dim()
                )));
            }
            opts.max_len = e.max_len.unwrap_or(model.max_len);
            if opts.max_len > model.backbone.config.max_seq_len {
                bail!(Exit::config("max_len exceeds the backbone's maximum sequence length"));
            }
            evaluate_rec(&MptScorer::new(&model, &ds.embeddings)?, &split, &opts)?
        }
    };
    report.config = cfg.to_json();
    report.write(&cfg.out_dir, stem)?;
    println!("{:<14} {:>4} {:>8} {:>8}", "mode", "N", "HR", "NDCG");
    for r in &report.rows {
        println!("{:<14} {:>4} {:>8.4} {:>8.4}", r.mode.to_string(), r.n, r.hr, r.ndcg);
    }
    println!("{} users ({} excluded)", split.users.len(), split.excluded);
    Ok(())
}

pub fn dump_attention(cfg: &RunConfig, user: Option<usize>, items: Option<Vec<usize>>) -> Result<()> {
    let model = load_rec_model(cfg)?;
    let emb_path = cfg.require(&cfg.paths.embeddings, "--embeddings")?;
    let embeddings = load_embeddings(&emb_path)?;
    let seq = match (items, user) {
        (Some(items), _) => items,
        (None, Some(u)) => {
            let ds = load_data(cfg)?;
            let full = ds
                .sequences
                .get(u)
                .ok_or_else(|| Exit::config(format!("user {u} not in the sequences file")))?;
            let ctx = &full[..full.len().saturating_sub(1)];
            truncate_recent(ctx, model.max_len).to_vec()
        }
        (None, None) => bail!(Exit::config("give --items or --user")),
    };
    let dump = mpt_core::rec::dump_attention(&model, &embeddings, &seq)?;
    let path = write_json(&cfg.out_dir, "attention.json", &report_with_config(cfg, &dump))?;
    println!(
        "{} layers x {} heads over {} positions: {}",
        dump.attention.len(),
        dump.attention.first().map_or(0, Vec::len),
        seq.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SweepRow {
    cell: usize,
    alpha: f64,
    num_states: usize,
    hidden_dim: usize,
    total_tokens: u64,
    steps: usize,
    eval_loss: f64,
    eval_stderr: f64,
    bayes_limit: f64,
    gap: f64,
    gap_stderr: f64,
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sweep;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let alphas = or(&s.alpha, cfg.pretrain.alpha);
    let states = if s.num_states.is_empty() {
        vec![cfg.pretrain.num_states]
    } else {
        s.num_states.clone()
    };
    let hidden = if s.hidden_dim.is_empty() {
        vec![cfg.model.hidden_dim]
    } else {
        s.hidden_dim.clone()
    };
    let budgets = if s.total_tokens.is_empty() {
        vec![cfg.pretrain.total_tokens]
    } else {
        s.total_tokens.clone()
    };

    let mut cells = Vec::new();
    for &a in &alphas {
        for &n in &states {
            for &d in &hidden {
                for &t in &budgets {
                    let mut model = cfg.model.clone();
                    model.hidden_dim = d;
                    let model = model.to_config()?;
                    let mut p = cfg.pretrain.clone();
                    p.alpha = a;
                    p.num_states = n;
                    p.total_tokens = t;
                    p.validate(&model)
                        .map_err(|e| Exit::config(format!("cell alpha={a} states={n} hidden={d}: {e}")))?;
                    cells.push((model, p));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (i, (model, p)) in cells.iter().enumerate() {
        let dir = cfg.out_dir.join(format!("cell_{i:03}"));
        log::info!(
            "cell {i}: alpha {} states {} hidden {} tokens {}",
            p.alpha,
            p.num_states,
            model.hidden_dim,
            p.total_tokens
        );
        let out = pretrain_run(model, p, None, Some(&dir)).map_err(|e| match e {
            PretrainError::Diverged { step, reason, .. } => {
                anyhow::Error::new(Exit::diverged(format!("cell {i} diverged at step {step}: {reason}")))
            }
            e => e.into(),
        })?;
        let mut cell_cfg = cfg.clone();
        cell_cfg.model.hidden_dim = model.hidden_dim;
        cell_cfg.pretrain = p.clone();
        write_json(&dir, "train_report.json", &report_with_config(&cell_cfg, &out.report))?;
        let last = out.report.records.last();
        let row = SweepRow {
            cell: i,
            alpha: p.alpha,
            num_states: p.num_states,
            hidden_dim: model.hidden_dim,
            total_tokens: p.total_tokens,
            steps: out.steps,
            eval_loss: last.map_or(f64::NAN, |r| r.eval_loss),
            eval_stderr: last.map_or(f64::NAN, |r| r.eval_stderr),
            bayes_limit: last.map_or(f64::NAN, |r| r.bayes_limit),
            gap: last.map_or(f64::NAN, |r| r.gap),
            gap_stderr: last.map_or(f64::NAN, |r| r.gap_stderr),
        };
        println!(
            "cell {i}: alpha {} states {} hidden {} tokens {} -> loss {:.4} bayes {:.4}",
            row.alpha, row.num_states, row.hidden_dim, row.total_tokens, row.eval_loss, row.bayes_limit
        );
        rows.push(row);
    }
    write_json(
        &cfg.out_dir,
        "sweep.json",
        &report_with_config(cfg, &json!({ "cells": rows })),
    )?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
