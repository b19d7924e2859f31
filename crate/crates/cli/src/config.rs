//! Experiment configuration: CLI flags merged over an optional TOML file
//! over per-experiment defaults. The resolved configuration is echoed into
//! every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pcesocp::{EstimatorMethod, PropagationMode};

use crate::CliError;

/// Partial settings as they appear on the command line or in a config file;
/// unset fields fall back to the experiment defaults.
#[derive(Debug, Clone, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Chaos degree d.
    #[arg(long)]
    pub degree: Option<usize>,
    /// Collocation nodes q.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Coefficient estimator: pm | ls | gls.
    #[arg(long)]
    pub estimator: Option<String>,
    /// Propagation: decoupled | coupled.
    #[arg(long)]
    pub coupling: Option<String>,
    /// Step-input scenario: 1 | 2.
    #[arg(long)]
    pub scenario: Option<u8>,
    /// Integrator step in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Sample count of the reference ensemble.
    #[arg(long = "mc-n")]
    #[serde(rename = "mc-n", alias = "mc_n")]
    pub mc_n: Option<usize>,
    /// RNG seed for sampled references.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reference surface mode: grid | mc.
    #[arg(long)]
    pub reference: Option<String>,
    /// Performance/robustness trade-off in (0, 1].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Optimizer iteration cap (robust experiment).
    #[arg(long = "opt-iters")]
    #[serde(rename = "opt-iters", alias = "opt_iters")]
    pub opt_iters: Option<usize>,
    /// Control intervals N (robust experiment).
    #[arg(long)]
    pub intervals: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Flags take precedence over `file` values.
    pub fn over(self, file: Overrides) -> Overrides {
        Overrides {
            degree: self.degree.or(file.degree),
            nodes: self.nodes.or(file.nodes),
            estimator: self.estimator.or(file.estimator),
            coupling: self.coupling.or(file.coupling),
            scenario: self.scenario.or(file.scenario),
            dt: self.dt.or(file.dt),
            mc_n: self.mc_n.or(file.mc_n),
            seed: self.seed.or(file.seed),
            reference: self.reference.or(file.reference),
            epsilon: self.epsilon.or(file.epsilon),
            opt_iters: self.opt_iters.or(file.opt_iters),
            intervals: self.intervals.or(file.intervals),
            out: self.out.or(file.out),
        }
    }

    pub fn from_file(path: &Path) -> Result<Overrides, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config file: {e}")))
    }
}

/// How the reference surface is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Deterministic endpoint-inclusive grid (reproduces the acceptance
    /// numbers exactly).
    Grid,
    /// Seeded Monte Carlo draws.
    Mc,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub degree: usize,
    pub nodes: usize,
    #[serde(serialize_with = "ser_estimator")]
    pub estimator: EstimatorMethod,
    #[serde(serialize_with = "ser_coupling")]
    pub coupling: PropagationMode,
    pub scenario: u8,
    pub dt: f64,
    pub mc_n: usize,
    pub seed: u64,
    pub reference: ReferenceMode,
    pub epsilon: f64,
    pub opt_iters: usize,
    pub intervals: usize,
    #[serde(skip)]
    pub out: PathBuf,
}

fn ser_estimator<S: serde::Serializer>(m: &EstimatorMethod, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&m.to_string())
}

fn ser_coupling<S: serde::Serializer>(m: &PropagationMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match m {
        PropagationMode::Decoupled => "decoupled",
        PropagationMode::Coupled => "coupled",
    })
}

impl ExperimentConfig {
    /// Merge overrides onto per-experiment defaults and validate.
    pub fn resolve(
        experiment: &str,
        defaults: ExperimentConfig,
        ov: &Overrides,
    ) -> Result<ExperimentConfig, CliError> {
        let estimator = match ov.estimator.as_deref() {
            None => defaults.estimator,
            Some("pm") => EstimatorMethod::Projection,
            Some("ls") => EstimatorMethod::LeastSquares,
            Some("gls") => EstimatorMethod::GeneralizedLeastSquares,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown estimator '{other}' (expected pm, ls or gls)"
                )))
            }
        };
        let coupling = match ov.coupling.as_deref() {
            None => defaults.coupling,
            Some("decoupled") => PropagationMode::Decoupled,
            Some("coupled") => PropagationMode::Coupled,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown coupling '{other}' (expected decoupled or coupled)"
                )))
            }
        };
        let reference = match ov.reference.as_deref() {
            None => defaults.reference,
            Some("grid") => ReferenceMode::Grid,
            Some("mc") => ReferenceMode::Mc,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown reference mode '{other}' (expected grid or mc)"
                )))
            }
        };
        let config = ExperimentConfig {
            experiment: experiment.to_string(),
            degree: ov.degree.unwrap_or(defaults.degree),
            nodes: ov.nodes.unwrap_or(defaults.nodes),
            estimator,
            coupling,
            scenario: ov.scenario.unwrap_or(defaults.scenario),
            dt: ov.dt.unwrap_or(defaults.dt),
            mc_n: ov.mc_n.unwrap_or(defaults.mc_n),
            seed: ov.seed.unwrap_or(defaults.seed),
            reference,
            epsilon: ov.epsilon.unwrap_or(defaults.epsilon),
            opt_iters: ov.opt_iters.unwrap_or(defaults.opt_iters),
            intervals: ov.intervals.unwrap_or(defaults.intervals),
            out: ov.out.clone().unwrap_or(defaults.out),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.nodes < self.degree + 1 {
            return Err(CliError::Usage(format!(
                "q = {} nodes cannot determine a degree-{} basis (need q >= d + 1)",
                self.nodes, self.degree
            )));
        }
        // Scenario 0 is "both", accepted by table1 only; the other
        // experiments reject it when they resolve their scenario.
        if self.scenario > 2 {
            return Err(CliError::Usage(format!(
                "scenario must be 1 or 2 (or 0 for both in table1), got {}",
                self.scenario
            )));
        }
        if !(self.dt > 0.0) {
            return Err(CliError::Usage("dt must be positive".into()));
        }
        if self.mc_n < 2 {
            return Err(CliError::Usage("mc-n must be at least 2".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(CliError::Usage("epsilon must lie in (0, 1]".into()));
        }
        if self.intervals < 1 {
            return Err(CliError::Usage("intervals must be at least 1".into()));
        }
        Ok(())
    }

    /// Single-line JSON echo embedded in output headers.
    pub fn header_line(&self) -> String {
        format!(
            "# config: {}",
            serde_json::to_string(self).expect("config serializes")
        )
    }
}
