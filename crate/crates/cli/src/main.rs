//! `hgad` command-line front end.
//!
//! Exit codes: 0 success, 1 numerical failure (NaN/Inf, divergence),
//! 2 I/O, format or configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgad_core::numerics::Precision;

#[derive(Debug, Parser)]
#[command(name = "hgad", version, about = "Normalizing-flow anomaly detection with a hierarchical mixture prior")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Override the run seed from the config or spec file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the training precision (f32 or f64).
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Run single-threaded so reruns reproduce every output byte.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-class train/test pair as HGF1 files.
    Synth {
        /// Synthetic spec (TOML); defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train {
        /// Run config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training features (HGF1).
        #[arg(long)]
        data: PathBuf,
        /// Labelled test features for the periodic AUROC column.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a test set with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test features (HGF1) with anomaly flags.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Histogram bins for the log-likelihood export.
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Train and evaluate the prior variants on the same data.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training features (HGF1).
        #[arg(long)]
        data: PathBuf,
        /// Test features (HGF1) with anomaly flags.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of SGC, FMC, ICG, ICG+MIM, full.
        #[arg(long, value_delimiter = ',', default_value = "SGC,FMC,ICG,ICG+MIM,full")]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&cli.global, spec.as_deref(), &out, &argv),
        Command::Train {
            config,
            data,
            test,
            out,
        } => commands::train(&cli.global, config.as_deref(), &data, test.as_deref(), &out, &argv),
        Command::Eval {
            checkpoint,
            data,
            out,
            bins,
        } => commands::eval(&cli.global, &checkpoint, &data, &out, bins, &argv),
        Command::Compare {
            config,
            data,
            test,
            out,
            variants,
        } => commands::compare(&cli.global, config.as_deref(), &data, &test, &out, &variants, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
