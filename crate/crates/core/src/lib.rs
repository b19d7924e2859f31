//! Generalized polynomial chaos (gPC) toolkit for propagating parametric
//! uncertainty through nonlinear ODEs, with a deterministic reformulation of
//! robustified quadratic-tracking stochastic optimal control problems in the
//! chaos-coefficient domain.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`basis`] — orthogonal polynomial bases matched to the input
//!   distributions (Legendre for uniform, probabilists' Hermite for Gaussian),
//!   tensorized over independent dimensions.
//! * [`quadrature`] — Gauss rules and design-of-experiment collocation sets.
//! * [`estimation`] — chaos-coefficient estimators (projection, least squares,
//!   generalised least squares), each materialized as an affine map.
//! * [`propagation`] — decoupled and coupled propagation of uncertainty
//!   through a user-supplied ODE.
//! * [`socp`] — the coefficient-domain stochastic cost and a projected
//!   quasi-Newton solver for the reformulated deterministic OCP.
//! * [`drivetrain`] — the eccentrically loaded drivetrain benchmark.
//! * [`mc`] — Monte Carlo / dense-grid reference ensembles.

pub mod basis;
pub mod drivetrain;
pub mod error;
pub mod estimation;
pub mod mc;
pub mod propagation;
pub mod quadrature;
pub mod socp;

pub use basis::{Distribution, ParameterSpace, PolynomialBasis};
pub use error::{Error, Result};
pub use estimation::{EstimatorMap, EstimatorMethod};
pub use propagation::{CoefficientField, FnSystem, TimeGrid, UncertainSystem};
pub use quadrature::{CollocationSet, DesignMethod};
pub use socp::{ControlGrid, ControlledSystem, CostWeights, PropagationMode, StochasticOcp};
