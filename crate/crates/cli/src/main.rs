//! `riesz`: fit nuisance learners, estimate moment functionals and run
//! simulation experiments from a TOML or JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riesz_core::Error;

#[derive(Debug, Parser)]
#[command(name = "riesz", version, about = "Debiased estimation of linear moment functionals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a learner on a dataset and write a model file.
    Fit(CommonArgs),
    /// Compute estimates from a dataset, fitting or loading the nuisances.
    Estimate(CommonArgs),
    /// Run a replication experiment on a simulated design.
    Experiment(CommonArgs),
    /// Re-render a stored report or estimates file as CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV, overriding `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated methods: direct, ips, dr, dr_post_tmle.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Cross-fitting scheme: none, simple or double.
    #[arg(long)]
    pub scheme: Option<String>,
    /// riesznet, forestriesz, plugin_binary or plugin_stein (or oracle for experiments).
    #[arg(long)]
    pub learner: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// A report.json from `experiment` or an estimates.json from `estimate`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram bins for the estimation errors.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_data_error() || matches!(e, Error::Shape(_)) => 3,
            CliError::Core(e) if e.is_numeric_error() => 4,
            CliError::Core(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("riesz: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
