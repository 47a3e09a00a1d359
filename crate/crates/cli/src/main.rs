//! `mpt`: pre-training, oracle checks, fine-tuning and evaluation.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration,
//! 3 missing checkpoint, 4 incompatible or corrupt checkpoint/data,
//! 5 numerical divergence.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpt_core::checkpoint::CheckpointError;
use mpt_core::model::ModelError;
use mpt_core::pretrain::{PretrainConfig, PretrainError};
use mpt_core::rec::{FinetuneMode, RecError, ShuffleMode};

use config::{Overrides, RunConfig};

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl Exit {
    pub fn config(msg: impl Into<String>) -> Self {
        Exit {
            code: 2,
            msg: msg.into(),
        }
    }
    pub fn missing(msg: impl Into<String>) -> Self {
        Exit {
            code: 3,
            msg: msg.into(),
        }
    }
    pub fn mismatch(msg: impl Into<String>) -> Self {
        Exit {
            code: 4,
            msg: msg.into(),
        }
    }
    pub fn diverged(msg: impl Into<String>) -> Self {
        Exit {
            code: 5,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        CheckpointError::Io { .. } => 1,
        _ => 4,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => 2,
        ModelError::Tensor(mpt_core::tensor::TensorError::NonFinite { .. }) => 5,
        _ => 4,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PretrainError>() {
            return match e {
                PretrainError::Config(_) => 2,
                PretrainError::Incompatible(_) => 4,
                PretrainError::Diverged { .. } => 5,
                PretrainError::Model(m) => model_code(m),
                PretrainError::Checkpoint(c) => checkpoint_code(c),
                PretrainError::Tensor(mpt_core::tensor::TensorError::NonFinite { .. }) => 5,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<RecError>() {
            return match e {
                RecError::Config(_) => 2,
                RecError::Dimension(_) | RecError::Format { .. } | RecError::NoUsers => 4,
                RecError::Model(m) => model_code(m),
                RecError::Checkpoint(c) => checkpoint_code(c),
                RecError::Tensor(mpt_core::tensor::TensorError::NonFinite { .. }) => 5,
                _ => 1,
            };
        }
    }
    1
}

#[derive(Parser)]
#[command(
    name = "mpt",
    version,
    about = "Markov pre-trained transformer for sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file, or a JSON report with an embedded config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

impl ModelFlags {
    fn push(&self, o: &mut Overrides) {
        o.set("model.num_layers", &self.layers);
        o.set("model.hidden_dim", &self.hidden);
        o.set("model.num_heads", &self.heads);
        o.set("model.ffn_hidden", &self.ffn_hidden);
        o.set("model.max_seq_len", &self.max_seq_len);
    }
}

#[derive(Args, Clone, Default)]
struct ChainFlags {
    /// Number of Markov states |S|.
    #[arg(long)]
    num_states: Option<usize>,
    /// Symmetric Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Trajectory length T.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Monte-Carlo chains for the Bayes limit.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the small desk preset (|S| = 10, T = 256, 2M tokens).
    #[arg(long)]
    desk: bool,
}

impl ChainFlags {
    fn push(&self, o: &mut Overrides) {
        o.set("pretrain.num_states", &self.num_states);
        o.set("pretrain.alpha", &self.alpha);
        o.set("pretrain.seq_len", &self.seq_len);
        o.set("pretrain.bayes_chains", &self.chains);
        o.set("pretrain.seed", &self.seed);
    }
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_tokens: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    /// Extra evaluation points by token count, comma separated.
    #[arg(long, value_delimiter = ',')]
    eval_tokens: Option<Vec<u64>>,
}

impl TrainFlags {
    fn push(&self, o: &mut Overrides) {
        o.set("pretrain.batch_size", &self.batch_size);
        o.set("pretrain.total_tokens", &self.total_tokens);
        o.set("pretrain.lr", &self.lr);
        o.set("pretrain.weight_decay", &self.weight_decay);
        o.set("pretrain.grad_clip_norm", &self.grad_clip);
        o.set("pretrain.eval_every", &self.eval_every);
        o.set("pretrain.eval_batches", &self.eval_batches);
        o.set("pretrain.eval_tokens", &self.eval_tokens);
    }
}

#[derive(Args, Clone, Default)]
struct RecPaths {
    /// Pre-trained backbone checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fine-tuned adaptor checkpoint.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Generator ground truth, for the oracle scorer.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

impl RecPaths {
    fn push(&self, o: &mut Overrides) {
        o.set("paths.checkpoint", &self.checkpoint);
        o.set("paths.head", &self.head);
        o.set("paths.sequences", &self.sequences);
        o.set("paths.embeddings", &self.embeddings);
        o.set("paths.ground_truth", &self.ground_truth);
    }
}

#[derive(Args, Clone, Default)]
struct EvalFlags {
    /// `mpt`, `popularity` or `oracle`.
    #[arg(long)]
    scorer: Option<String>,
    /// Comma-separated shuffle modes.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<ShuffleMode>>,
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    /// `test` or `valid`.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EvalFlags {
    fn push(&self, o: &mut Overrides) {
        o.set("eval.scorer", &self.scorer);
        o.set("eval.modes", &self.modes);
        o.set("eval.cutoffs", &self.cutoffs);
        o.set("eval.target", &self.target);
        o.set("eval.max_len", &self.max_len);
        o.set("eval.seed", &self.seed);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a backbone on synthetic Markov chains.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        chain: ChainFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from this backbone checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Monte-Carlo estimate of the Bayes-optimal next-state loss.
    BayesLimit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        chain: ChainFlags,
    },
    /// Held-out next-state loss of a checkpoint against the Bayes estimator.
    EvalNsp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        chain: ChainFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_batches: Option<usize>,
    },
    /// Write a synthetic interaction corpus drawn from latent item chains.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Number of latent chains.
        #[arg(long)]
        num_chains: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Item embedding width.
        #[arg(long)]
        d_text: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Store embeddings in the binary checkpoint container.
        #[arg(long)]
        binary: bool,
    },
    /// Fine-tune the adaptor (and optionally LoRA) for next-item prediction.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: RecPaths,
        /// `adaptor_only` or `adaptor_plus_lora`.
        #[arg(long)]
        mode: Option<FinetuneMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lora_rank: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ranking metrics under the chosen shuffle modes.
    EvalRec {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: RecPaths,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Compare chronological, partial and complete shuffles.
    ShuffleEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: RecPaths,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Attention maps of the fine-tuned model on one sequence.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: RecPaths,
        /// Use this user's test context.
        #[arg(long)]
        user: Option<usize>,
        /// Explicit comma-separated item sequence.
        #[arg(long, value_delimiter = ',')]
        items: Option<Vec<usize>>,
    },
    /// Pre-train every cell of a grid over α, |S|, hidden size and budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        chain: ChainFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        num_states_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        hiddens: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        token_budgets: Option<Vec<u64>>,
    },
}

fn base_config(desk: bool) -> RunConfig {
    let mut c = RunConfig::default();
    if desk {
        c.pretrain = PretrainConfig::desk();
        c.model.num_layers = 2;
        c.model.hidden_dim = 64;
        c.model.num_heads = 2;
        c.model.max_seq_len = 256;
    }
    c
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut o = Overrides::default();
    let (common, desk) = match &cli.command {
        Command::Pretrain {
            common,
            model,
            chain,
            train,
            init,
        } => {
            model.push(&mut o);
            chain.push(&mut o);
            train.push(&mut o);
            o.set("paths.init", init);
            (common, chain.desk)
        }
        Command::BayesLimit { common, chain } => {
            chain.push(&mut o);
            (common, chain.desk)
        }
        Command::EvalNsp {
            common,
            chain,
            checkpoint,
            batch_size,
            eval_batches,
        } => {
            chain.push(&mut o);
            o.set("paths.checkpoint", checkpoint);
            o.set("pretrain.batch_size", batch_size);
            o.set("pretrain.eval_batches", eval_batches);
            (common, chain.desk)
        }
        Command::GenSynth {
            common,
            users,
            items,
            num_chains,
            alpha,
            min_len,
            max_len,
            d_text,
            seed,
            binary: _,
        } => {
            o.set("synth.num_users", users);
            o.set("synth.num_items", items);
            o.set("synth.num_chains", num_chains);
            o.set("synth.alpha", alpha);
            o.set("synth.min_len", min_len);
            o.set("synth.max_len", max_len);
            o.set("synth.d_text", d_text);
            o.set("synth.seed", seed);
            (common, false)
        }
        Command::Finetune {
            common,
            paths,
            mode,
            epochs,
            batch_size,
            lr,
            weight_decay,
            max_len,
            dropout,
            temperature,
            patience,
            lora_rank,
            lora_alpha,
            seed,
        } => {
            paths.push(&mut o);
            o.set("finetune.mode", mode);
            o.set("finetune.epochs", epochs);
            o.set("finetune.batch_size", batch_size);
            o.set("finetune.lr", lr);
            o.set("finetune.weight_decay", weight_decay);
            o.set("finetune.max_len", max_len);
            o.set("finetune.dropout", dropout);
            o.set("finetune.temperature", temperature);
            o.set("finetune.patience", patience);
            o.set("finetune.lora.rank", lora_rank);
            o.set("finetune.lora.alpha", lora_alpha);
            o.set("finetune.seed", seed);
            (common, false)
        }
        Command::EvalRec { common, paths, eval } | Command::ShuffleEval { common, paths, eval } => {
            paths.push(&mut o);
            eval.push(&mut o);
            (common, false)
        }
        Command::DumpAttention { common, paths, .. } => {
            paths.push(&mut o);
            (common, false)
        }
        Command::Sweep {
            common,
            model,
            chain,
            train,
            alphas,
            num_states_list,
            hiddens,
            token_budgets,
        } => {
            model.push(&mut o);
            chain.push(&mut o);
            train.push(&mut o);
            o.set("sweep.alpha", alphas);
            o.set("sweep.num_states", num_states_list);
            o.set("sweep.hidden_dim", hiddens);
            o.set("sweep.total_tokens", token_budgets);
            (common, chain.desk)
        }
    };
    o.set("threads", &common.threads);
    o.set("out_dir", &common.out);
    let level = if common.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let cfg = config::resolve(base_config(desk), common.config.as_deref(), o)?;
    if common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Exit::config(format!("cannot size thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Pretrain { .. } => commands::pretrain(&cfg),
        Command::BayesLimit { .. } => commands::bayes_limit(&cfg),
        Command::EvalNsp { .. } => commands::eval_nsp(&cfg),
        Command::GenSynth { binary, .. } => commands::gen_synth(&cfg, *binary),
        Command::Finetune { .. } => commands::finetune(&cfg),
        Command::EvalRec { .. } => commands::eval_rec(&cfg, "rec_eval", None),
        Command::ShuffleEval { .. } => commands::eval_rec(&cfg, "shuffle_eval", Some(ShuffleMode::ALL.to_vec())),
        Command::DumpAttention { user, items, .. } => commands::dump_attention(&cfg, *user, items.clone()),
        Command::Sweep { .. } => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
