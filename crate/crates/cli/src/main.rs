//! `skilltok`: pretraining, tokenization, policy learning and ablations on
//! the point-mass suite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use skilltok::decoder::DecoderMode;

#[derive(Parser, Debug)]
#[command(name = "skilltok", version, about = "Skill tokens from quantized actions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub codebook_size: Option<usize>,
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    #[arg(long, global = true)]
    pub cap_k: Option<usize>,
    /// Decoder-loss weight; differs from the mode's default only with
    /// --allow-beta-override.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub allow_beta_override: bool,
    #[arg(long, global = true, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Pretraining dataset (JSONL); generated from the suite when absent.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DecoderArg {
    L1,
    Gmm,
}

impl From<DecoderArg> for DecoderMode {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::L1 => DecoderMode::DeterministicL1,
            DecoderArg::Gmm => DecoderMode::Gmm,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write expert trajectories for the pretraining (or held-out) tasks.
    Generate {
        #[arg(long)]
        per_task: Option<usize>,
        #[arg(long)]
        heldout: bool,
    },
    /// Stage-I pretraining; writes model.ckpt.
    Pretrain {
        #[arg(long)]
        no_dynamics: bool,
    },
    /// Quantize the dataset into code sequences; writes corpus.jsonl.
    EncodeCorpus {
        #[arg(long)]
        model: PathBuf,
    },
    /// Learn skill tokens from a code corpus; writes vocab.json.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Greedy token targets for every dataset timestep; writes targets.jsonl.
    Relabel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Multitask token policy on the pretraining data; writes multitask.ckpt.
    TrainMultitask {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Few-shot adaptation to held-out tasks.
    Fewshot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Task ids; all held-out tasks when omitted.
        #[arg(long)]
        task: Vec<usize>,
    },
    /// Evaluate a model with an attached policy; writes rollouts.json.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 40)]
        episodes: usize,
        /// Sample tokens (and GMM actions) instead of taking the argmax.
        #[arg(long)]
        sampled: bool,
    },
    /// Code-collapse metric of a pretrained model.
    Zeta {
        #[arg(long)]
        model: PathBuf,
    },
    /// Token-length histogram; usage counts come from the corpus when given.
    Histogram {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run the configured ablation grid.
    Ablate,
    /// Render an SVG summary of a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<skilltok::Error>()
                .map(skilltok::Error::kind)
                .unwrap_or("cli");
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
