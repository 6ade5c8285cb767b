//! Command-line front end: error-profile fitting, synthesis, simulation, the controller
//! comparison experiment and offline verification of response files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sls-robust", version, about = "Robust perception-based controller synthesis")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving the artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignKind {
    NominalL1,
    RobustQuadratic,
    RobustImitation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImpulseKind {
    /// Unit perturbation of one state coordinate.
    State,
    /// Unit perception error on one measured coordinate.
    Measurement,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit the perception error profile of a trajectory dataset.
    FitError {
        /// CSV with columns `t, x0.., y0..`; the synthetic training pass when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Slope quantile; the configured one, or 0.95.
        #[arg(long)]
        quantile: Option<f64>,
    },
    /// Synthesize system responses and realise the controller.
    Synthesize {
        #[arg(long, value_enum, default_value_t = DesignKind::RobustQuadratic)]
        design: DesignKind,
        /// Error profile written by `fit-error`, replacing the configured bounds.
        #[arg(long)]
        error_model: Option<PathBuf>,
    },
    /// Run one closed-loop simulation, or an impulse test.
    Simulate {
        /// Controller written by `synthesize`; the PD baseline when absent.
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Guarantee report supplying the bound the run is checked against.
        #[arg(long)]
        guarantee: Option<PathBuf>,
        #[arg(long)]
        degradation: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        impulse: Option<ImpulseKind>,
        /// Coordinate receiving the impulse.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare the four controllers under nominal and degraded perception.
    Experiment,
    /// Re-check achievability and robustness of a responses file.
    Verify {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        error_model: Option<PathBuf>,
        #[arg(long)]
        skip_robustness: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FitError { .. } => "fit-error",
            Command::Synthesize { .. } => "synthesize",
            Command::Simulate { .. } => "simulate",
            Command::Experiment => "experiment",
            Command::Verify { .. } => "verify",
        }
    }
}

/// Reads `SLS_ROBUST_THREADS` and caps the worker pool accordingly.
pub fn apply_thread_limit() {
    if let Ok(value) = std::env::var("SLS_ROBUST_THREADS") {
        match value.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                if !sls_core::exec::configure_threads(n) {
                    log::debug!("worker pool already configured or parallelism disabled");
                }
            }
            _ => log::warn!("ignoring SLS_ROBUST_THREADS={value}: expected a positive integer"),
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(&cli) {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
