//! Experiment runner: configuration, subcommands, checkpointing, and
//! CSV/JSON reporting.
//!
//! `udarts <subcommand> --config <path> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 ok, 1 usage/config, 2 runtime failure, 3 acceptance
//! check failure. The `UDARTS_THREADS` environment variable caps how
//! many (mode, seed) runs execute in parallel.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod runner;

use crate::error::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "udarts", version, about = "Uncertainty-aware differentiable architecture search, desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, clap::Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Bi-level architecture search: per-epoch loss and spectra CSVs,
    /// periodic checkpoints, and the discretized architecture.
    Search(CommonArgs),
    /// Retrain the discretized architecture from scratch.
    TrainFinal(CommonArgs),
    /// Accuracy and predictive variance of a checkpoint, optionally
    /// under input/parameter noise.
    Evaluate(CommonArgs),
    /// Recompute eigenvalue trajectories from saved checkpoints.
    Spectra(CommonArgs),
    /// Exact linear-model verification of the eigenvalue lemmas.
    VerifyLemmas(CommonArgs),
    /// Accuracy/variance grid over input SNR and parameter noise.
    NoiseSweep(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Search(a)
            | Command::TrainFinal(a)
            | Command::Evaluate(a)
            | Command::Spectra(a)
            | Command::VerifyLemmas(a)
            | Command::NoiseSweep(a) => a,
        }
    }
}

/// Exit-code classification of failures.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::UnknownSource(_) => 1,
        Error::AcceptanceFailed(_) => 3,
        _ => 2,
    }
}

/// Run a parsed command; returns the process exit code.
pub fn run(command: &Command) -> i32 {
    let args = command.common();
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    let out = args.out.as_deref();
    let result = match command {
        Command::Search(_) => runner::search(&cfg, args.seed, out),
        Command::TrainFinal(_) => runner::train_final(&cfg, args.seed, out),
        Command::Evaluate(_) => runner::evaluate(&cfg, args.seed, out),
        Command::Spectra(_) => runner::spectra(&cfg, args.seed, out),
        Command::VerifyLemmas(_) => runner::verify_lemmas(&cfg, args.seed, out),
        Command::NoiseSweep(_) => runner::noise_sweep(&cfg, args.seed, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the thin binary.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli.command),
        Err(e) => {
            // Help/version requests are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
