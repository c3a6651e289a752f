//! `semtok`: scene-graph visual tokens end to end.
//!
//! One binary drives the whole desk-scale pipeline: generate a synthetic
//! scene corpus, train the dual encoder contrastively, evaluate retrieval
//! and the relation-sensitive probes, inspect samples or checkpoints, and
//! re-run the correctness suite. Configuration comes from a TOML file over
//! a built-in preset, with flags overriding both; every run drops a
//! manifest into its output directory. Log verbosity follows `RUST_LOG`
//! (default `info`).

mod config;
mod ops;

use clap::{Parser, Subcommand};
use config::{effective_config, Overrides};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "semtok", version, about = "Scene-graph visual tokens: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation corpora with ground-truth sidecars.
    GenData {
        /// TOML run configuration; the desk-scale preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the dual encoder on the training corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log validation retrieval every N epochs (0 = never).
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
    },
    /// Evaluate the checkpoint on the validation corpus.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Dump a sample (token table, rank grid) or a checkpoint (inventory).
    Inspect {
        /// Corpus holding the sample.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sample id to dump, e.g. synth-000003.
        #[arg(long)]
        sample: Option<String>,
        /// Checkpoint for the weight table, or the sole inspection target.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the correctness suite; nonzero exit on any failure.
    Verify {
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::GenData { config, overrides } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            ops::gen_data(&cfg)
        }
        Command::Train { config, overrides, resume, eval_every } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            ops::train(&cfg, resume.as_deref(), eval_every)
        }
        Command::Eval { config, overrides } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            ops::eval(&cfg)
        }
        Command::Inspect { corpus, sample, checkpoint } => {
            ops::inspect(corpus.as_deref(), sample.as_deref(), checkpoint.as_deref())
        }
        Command::Verify { seed } => ops::verify(seed),
    }
}
