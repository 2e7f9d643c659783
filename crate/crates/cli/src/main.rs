//! `glotta`: train byte-level tokenizers and small decoder models, then
//! report neuron importance and cross-language representation similarity.
//!
//! Every subcommand reads one TOML config (`--config`), resolves `--seed`
//! and `--out` overrides, and writes its artifacts plus the resolved
//! `run_config.toml` into the output directory. Exit codes: 0 when all
//! outputs were written, 2 for usage errors (bad config, missing inputs),
//! 1 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glotta_core::error::Result;

use commands::RunFlags;

#[derive(Parser)]
#[command(name = "glotta", version, about = "small multilingual LM lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections; results never depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a byte-level BPE tokenizer on a JSONL document corpus.
    TokenizerTrain(Common),
    /// Tokens-per-word report over a parallel corpus.
    TokenizerFertility(Common),
    /// Train (or resume) a model; writes checkpoints and metrics.jsonl.
    Train(Common),
    /// Per-language neuron importance CSVs from a checkpoint.
    ProfileNeurons(ProfileArgs),
    /// Per-layer language similarity matrices from a checkpoint.
    AnalyzeRepr(Common),
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    /// Also compare exact and first-order importance on a neuron sample
    /// and report their Spearman correlation.
    #[arg(long)]
    validate: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.cmd {
        Cmd::TokenizerTrain(c)
        | Cmd::TokenizerFertility(c)
        | Cmd::Train(c)
        | Cmd::AnalyzeRepr(c) => c,
        Cmd::ProfileNeurons(p) => &p.common,
    };
    if let Some(n) = common.workers {
        // Applies process-wide; modules guarantee worker-count invariance.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("worker pool is configured before any parallel work");
    }
    let flags = RunFlags {
        seed: common.seed,
        out: common.out.clone(),
        force: common.force,
    };
    match &cli.cmd {
        Cmd::TokenizerTrain(c) => {
            commands::tokenizer_train(config::load_config(&c.config)?, flags)
        }
        Cmd::TokenizerFertility(c) => {
            commands::tokenizer_fertility(config::load_config(&c.config)?, flags)
        }
        Cmd::Train(c) => commands::train(config::load_config(&c.config)?, flags),
        Cmd::ProfileNeurons(p) => {
            commands::profile_neurons(config::load_config(&p.common.config)?, flags, p.validate)
        }
        Cmd::AnalyzeRepr(c) => commands::analyze_repr(config::load_config(&c.config)?, flags),
    }
}
