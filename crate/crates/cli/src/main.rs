//! `qsteer` — collision-model steering toolkit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "qsteer", version, about = "Steering an open driven qubit by measuring its collision environment")]
struct Cli {
    /// flat key=value config file; command-line flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the analytic identities the simulator is built on
    Validate,
    /// Generate a trajectory-endpoint ensemble (CSV + JSON summary)
    Ensemble,
    /// Evaluate the three-term steering inequality
    Steering,
    /// Sweep the bath polarization and bisect the steerability threshold
    SweepEta,
    /// Map post-collision entanglement over the (dt, eta) grid
    ConcurrenceMap,
    /// Play the announcement game: honest runs and cheating strategies
    Protocol,
}

#[derive(Debug)]
pub enum AppError {
    /// invalid configuration → exit 2
    Config(ConfigError),
    /// an acceptance-style check failed → exit 1
    Check(String),
    Core(qsteer::Error),
    Io(std::io::Error),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<qsteer::Error> for AppError {
    fn from(e: qsteer::Error) -> Self {
        AppError::Core(e)
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e)
    }
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            // a statistics failure is a failed check, not a bad config
            AppError::Check(_) | AppError::Core(qsteer::Error::Statistics(_)) => 1,
            _ => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            AppError::Config(e) => format!("configuration error: {e}"),
            AppError::Check(m) => m.clone(),
            AppError::Core(e) => e.to_string(),
            AppError::Io(e) => format!("io error: {e}"),
        }
    }
}

fn run(cli: &Cli) -> Result<(), AppError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if cfg.workers > 0 {
        // ignore the error when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    if !cfg.seed_given {
        eprintln!("seed not given; using generated master seed {}", cfg.seed);
    }
    match cli.command {
        Command::Validate => commands::cmd_validate(&cfg),
        Command::Ensemble => commands::cmd_ensemble(&cfg),
        Command::Steering => commands::cmd_steering(&cfg),
        Command::SweepEta => commands::cmd_sweep_eta(&cfg),
        Command::ConcurrenceMap => commands::cmd_concurrence_map(&cfg),
        Command::Protocol => commands::cmd_protocol(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
