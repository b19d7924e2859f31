//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),

    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("collocation set carries no weights ({0} requires a weighted rule)")]
    MissingWeights(&'static str),

    #[error("ill-posed design: {0}")]
    IllPosedDesign(String),

    #[error("non-finite state at t = {time:.6} s")]
    Divergence { time: f64 },

    #[error("non-finite state at t = {time:.6} s (collocation node {node})")]
    NodeDivergence { time: f64, node: usize },

    #[error("time {t} outside horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),

    #[error("invalid control grid: {0}")]
    InvalidControlGrid(String),

    #[error("cost is not finite at the initial control guess")]
    InvalidStart,

    #[error("ensemble contains no usable samples ({0})")]
    EmptyEnsemble(String),
}

impl Error {
    /// True for failures caused by a diverging simulation rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NodeDivergence { .. }
        )
    }
}
