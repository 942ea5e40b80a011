//! `uturn` command-line driver: subcommands over one JSON experiment config,
//! each writing CSV/JSON artifacts into a fresh run directory.

pub mod commands;
pub mod config;
pub mod plot;
pub mod rundir;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] uturn_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("artifact hashes do not match their manifests: {}", .0.join(", "))]
    Integrity(Vec<String>),
    #[error("self-test failed: {0} check(s)")]
    SelfTest(usize),
}

impl CliError {
    /// 2 for bad configuration or inputs, 3 for numerical failures, 4 for a
    /// failed self-test, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(uturn_core::Error::Io(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Json(_) => 2,
            CliError::SelfTest(_) => 4,
            CliError::Io(_) | CliError::Integrity(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uturn", version, about = "VP diffusion diagnostics and U-turn sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config entry, e.g. `--set schedule.kind=cosine`.
    #[arg(long = "set", global = true, value_parser = config::parse_set)]
    pub overrides: Vec<(String, String)>,

    /// Parent directory for run directories (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Also write an SVG chart next to every CSV.
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Forward ensemble: moments, autocorrelations and KS ratio against the
    /// closed forms.
    Forward,
    /// Fit the MLP score by weighted denoising score matching.
    TrainScore,
    /// Noise-initialized reverse generation with reverse autocorrelation and
    /// half-decay curves.
    Reverse,
    /// Score-norm curves, their plateau and the KS ratio along the forward
    /// process.
    Diagnose,
    /// KID between two sample files.
    Kid {
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        gen: Option<PathBuf>,
    },
    /// KID of U-turn and noise-initialized samples over turn steps.
    UturnScan,
    /// Verify and summarize existing run directories.
    Report {
        /// Run directories; defaults to every run under the output directory.
        dirs: Vec<PathBuf>,
    },
    /// Closed-form oracle suite.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::TrainScore => "train-score",
            Command::Reverse => "reverse",
            Command::Diagnose => "diagnose",
            Command::Kid { .. } => "kid",
            Command::UturnScan => "uturn-scan",
            Command::Report { .. } => "report",
            Command::Selftest => "selftest",
        }
    }
}

/// What a finished subcommand reports back.
#[derive(Debug)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub message: String,
}

/// Runs one subcommand inside a thread pool sized by `--threads`.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Config(vec!["--threads must be positive".into()]));
        }
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(vec![format!("cannot start thread pool: {e}")]))?;
    pool.install(|| commands::dispatch(cli))
}
