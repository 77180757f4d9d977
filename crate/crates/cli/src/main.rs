//! `gref` — the generative slate reranking pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config
//! errors (clap reports its own parse failures with code 2 as well).

mod commands;
mod runconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

#[derive(Parser)]
#[command(
    name = "gref",
    version,
    about = "Generative slate reranking: simulate sessions, train in two stages, \
             decode, evaluate, benchmark, and ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Plain-text config file ([model] / [train] / [sim] sections)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for all outputs
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed; feeds train.seed and sim.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key (repeatable): section.key=value
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Ar,
    Omtp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchModeArg {
    Ar,
    Omtp,
    Both,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic session corpus (sessions.jsonl)
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pre-train on exposure order; writes checkpoint.gref + loss_curve.csv
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Session JSONL file
        #[arg(long)]
        data: PathBuf,
    },
    /// Preference post-training from a pre-trained checkpoint
    Dpo {
        #[command(flatten)]
        common: CommonArgs,
        /// Session JSONL file
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint to start from (and freeze as reference)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Allow post-training from random parameters
        #[arg(long)]
        allow_scratch: bool,
    },
    /// Decode slates for every session; writes decodes.jsonl
    Decode {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// Decoder: ar (one item per pass) or omtp (multi-head parallel)
        #[arg(long, value_enum, default_value = "omtp")]
        mode: ModeArg,
        /// Heads used by the parallel decoder (default: model's head count)
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Offline metrics (AUC, NDCG, latency); writes metrics.csv/.json
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum, default_value = "omtp")]
        mode: ModeArg,
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Single-sample decode latency benchmark; writes bench.csv
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: BenchModeArg,
        #[arg(long)]
        heads: Option<usize>,
        /// Discarded warmup decodes per mode
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Timed decodes per mode (at least 30)
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Train the ablation grid on a fresh synthetic corpus
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Seeds to sweep, derived as seed, seed+1, ...
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
