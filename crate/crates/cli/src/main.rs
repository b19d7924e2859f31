//! `pcesocp` — run the drivetrain uncertainty-propagation and robust
//! start-up experiments from the command line.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure
//! (divergent simulation or optimizer), 1 I/O failure.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides, ReferenceMode};
use pcesocp::{EstimatorMethod, PropagationMode};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(pcesocp::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<pcesocp::Error> for CliError {
    fn from(e: pcesocp::Error) -> Self {
        CliError::Numerical(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Parser)]
#[command(name = "pcesocp", version, about = "Polynomial-chaos uncertainty propagation and robust start-up of an eccentric drivetrain")]
struct Cli {
    /// Optional TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// RMSE of the gPC surface against the reference over the (q, d) grid,
    /// for both estimators and both couplings.
    Table1(Overrides),
    /// Emit reference and gPC response surfaces on a (t, omega) grid.
    Surfaces(Overrides),
    /// Emit gPC mean/99%-band trajectories against the Monte Carlo band.
    Bands(Overrides),
    /// Robustified optimal start-up against the computed-torque baseline.
    Robust(Overrides),
    /// One propagation run: moments over time plus the surface RMSE.
    Propagate(Overrides),
}

fn defaults(experiment: &str) -> ExperimentConfig {
    let base = ExperimentConfig {
        experiment: experiment.to_string(),
        degree: 4,
        nodes: 5,
        estimator: EstimatorMethod::Projection,
        coupling: PropagationMode::Decoupled,
        scenario: 2,
        dt: 1e-3,
        mc_n: 500,
        seed: 0,
        reference: ReferenceMode::Grid,
        epsilon: 0.4,
        opt_iters: 60,
        intervals: 40,
        out: PathBuf::from("."),
    };
    match experiment {
        // The table sweeps its own (q, d, method, coupling) grid; scenario 0
        // means both scenarios.
        "table1" => ExperimentConfig {
            degree: 20,
            nodes: 21,
            scenario: 0,
            ..base
        },
        "surfaces" => ExperimentConfig {
            degree: 20,
            nodes: 21,
            coupling: PropagationMode::Coupled,
            scenario: 1,
            ..base
        },
        "bands" => ExperimentConfig {
            degree: 2,
            nodes: 5,
            reference: ReferenceMode::Mc,
            ..base
        },
        "robust" => ExperimentConfig {
            degree: 7,
            nodes: 15,
            ..base
        },
        _ => base,
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let (name, flags): (&str, &Overrides) = match &cli.command {
        Command::Table1(o) => ("table1", o),
        Command::Surfaces(o) => ("surfaces", o),
        Command::Bands(o) => ("bands", o),
        Command::Robust(o) => ("robust", o),
        Command::Propagate(o) => ("propagate", o),
    };
    let merged = match &cli.config {
        Some(path) => flags.clone().over(Overrides::from_file(path)?),
        None => flags.clone(),
    };
    let cfg = ExperimentConfig::resolve(name, defaults(name), &merged)?;
    match &cli.command {
        Command::Table1(flags) => experiments::run_table1(&cfg, flags),
        Command::Surfaces(_) => experiments::run_surfaces(&cfg),
        Command::Bands(_) => experiments::run_bands(&cfg),
        Command::Robust(_) => experiments::run_robust(&cfg),
        Command::Propagate(_) => experiments::run_propagate(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(e)) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(3)
        }
        Err(CliError::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::FAILURE
        }
    }
}
