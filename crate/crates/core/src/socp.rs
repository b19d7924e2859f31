//! Deterministic reformulation of the robustified stochastic optimal control
//! problem in the chaos-coefficient domain.
//!
//! The control signal is continuous piecewise linear on `n_t` intervals with
//! node vector `U`. For the quadratic tracking cost the stochastic objective
//! collapses to
//!
//! ```text
//! K = int  eps ||X~ - R~||^2_{D (x) Q} + (1 - eps) ||X~||^2_{E (x) I}  dtau
//!     + eps ||U||^2_{M (x) R}
//! ```
//!
//! where `D` is the basis Gram matrix, `E = D - e1 e1^T` strips the mean
//! block, `R~ = e1 (x) r(tau)` places the reference in the mean block only,
//! and `M` is the hat-function Gram matrix of the control parameterization.
//! The time integral runs over the stored coefficient grid (trapezoid); the
//! control term is exact through `M`.
//!
//! `solve` minimizes `K` over box-constrained `U` with a projected
//! quasi-Newton (BFGS) iteration and finite-difference gradients of the full
//! propagate-then-cost map (single shooting).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::PolynomialBasis;
use crate::error::{Error, Result};
use crate::estimation::EstimatorMap;
use crate::propagation::{
    propagate_coupled, propagate_decoupled, CoefficientField, TimeGrid, UncertainSystem,
};

/// A controlled ODE whose time dependence enters only through the input
/// policy.
pub trait ControlledSystem: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn initial_state(&self, omega: &[f64]) -> DVector<f64>;
    fn dynamics(&self, state: &DVector<f64>, control: &DVector<f64>, omega: &[f64])
        -> DVector<f64>;
}

/// Continuous piecewise-linear control policy with box bounds.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    horizon: f64,
    /// Node values, one column per node: `n_u x (n_t + 1)`.
    values: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ControlGrid {
    pub fn new(
        horizon: f64,
        values: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidControlGrid("horizon must be positive".into()));
        }
        if values.ncols() < 2 {
            return Err(Error::InvalidControlGrid(
                "need at least one control interval (two nodes)".into(),
            ));
        }
        let n_u = values.nrows();
        if lower.len() != n_u || upper.len() != n_u {
            return Err(Error::InvalidControlGrid(
                "bound dimensions must match the control dimension".into(),
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidControlGrid(
                "lower bounds must not exceed upper bounds".into(),
            ));
        }
        let grid = Self {
            horizon,
            values,
            lower,
            upper,
        };
        if !grid.is_feasible(&grid.stacked()) {
            return Err(Error::InvalidControlGrid(
                "node values violate the box bounds".into(),
            ));
        }
        Ok(grid)
    }

    /// Grid with all nodes at one value.
    pub fn constant(
        horizon: f64,
        n_intervals: usize,
        value: &DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let mut values = DMatrix::zeros(value.len(), n_intervals + 1);
        for k in 0..=n_intervals {
            values.set_column(k, value);
        }
        Self::new(horizon, values, lower, upper)
    }

    /// Grid sampling a continuous policy at the nodes (values are clamped to
    /// the bounds).
    pub fn from_policy(
        horizon: f64,
        n_intervals: usize,
        lower: DVector<f64>,
        upper: DVector<f64>,
        policy: impl Fn(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let n_u = lower.len();
        let delta = horizon / n_intervals as f64;
        let mut values = DMatrix::zeros(n_u, n_intervals + 1);
        for k in 0..=n_intervals {
            let mut v = policy(k as f64 * delta);
            for c in 0..n_u {
                v[c] = v[c].clamp(lower[c], upper[c]);
            }
            values.set_column(k, &v);
        }
        Self::new(horizon, values, lower, upper)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_intervals(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.values.nrows()
    }

    /// Interval length `Delta = T / n_t`.
    pub fn delta(&self) -> f64 {
        self.horizon / self.n_intervals() as f64
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Node values as the stacked vector `U = [u_0; ...; u_{n_t}]`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    /// Same bounds and horizon, different node values.
    pub fn with_stacked(&self, stacked: &DVector<f64>) -> Result<Self> {
        if stacked.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} stacked control values", self.values.len()),
                got: format!("{}", stacked.len()),
            });
        }
        Ok(Self {
            horizon: self.horizon,
            values: DMatrix::from_column_slice(
                self.values.nrows(),
                self.values.ncols(),
                stacked.as_slice(),
            ),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        })
    }

    /// Componentwise projection of a stacked vector onto the box.
    pub fn project(&self, stacked: &DVector<f64>) -> DVector<f64> {
        let n_u = self.control_dim();
        DVector::from_iterator(
            stacked.len(),
            stacked
                .iter()
                .enumerate()
                .map(|(i, &v)| v.clamp(self.lower[i % n_u], self.upper[i % n_u])),
        )
    }

    pub fn is_feasible(&self, stacked: &DVector<f64>) -> bool {
        let n_u = self.control_dim();
        stacked
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i % n_u] && v <= self.upper[i % n_u])
    }

    /// Piecewise-linear interpolation `u(t; U)`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let tol = 1e-9 * self.horizon.max(1.0);
        if t < -tol || t > self.horizon + tol {
            return Err(Error::OutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.eval_clamped(t))
    }

    pub(crate) fn eval_clamped(&self, t: f64) -> DVector<f64> {
        let s = (t / self.delta()).clamp(0.0, self.n_intervals() as f64);
        let k = (s.floor() as usize).min(self.n_intervals() - 1);
        let frac = s - k as f64;
        let left = self.values.column(k);
        let right = self.values.column(k + 1);
        DVector::from_iterator(
            self.control_dim(),
            left.iter()
                .zip(right.iter())
                .map(|(&a, &b)| a + frac * (b - a)),
        )
    }
}

/// Hat-function Gram matrix of the piecewise-linear parameterization:
/// `M = Delta/6 tridiag(1, [2, 4, ..., 4, 2], 1)`, so `U^T M U` is the exact
/// control energy integral.
pub fn build_m(n_intervals: usize, delta: f64) -> DMatrix<f64> {
    assert!(n_intervals >= 1 && delta > 0.0);
    let n = n_intervals + 1;
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = if k == 0 || k == n - 1 { 2.0 } else { 4.0 };
        if k + 1 < n {
            m[(k, k + 1)] = 1.0;
            m[(k + 1, k)] = 1.0;
        }
    }
    m * (delta / 6.0)
}

/// Covariance-penalty weight `E = D - e1 e1^T`: the Gram matrix with the
/// mean block stripped.
pub fn build_e(basis: &PolynomialBasis) -> DMatrix<f64> {
    let mut e = basis.gram();
    e[(0, 0)] = 0.0;
    e
}

/// Weights of the stochastic quadratic tracking cost.
#[derive(Clone)]
pub struct CostWeights {
    state_weight: DMatrix<f64>,
    control_weight: DMatrix<f64>,
    epsilon: f64,
    reference: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
}

impl CostWeights {
    /// `epsilon` trades expected tracking performance (`epsilon = 1`) against
    /// the integrated covariance penalty.
    pub fn new(
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
        epsilon: f64,
        reference: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidWeights(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        check_spd(&state_weight, "state weight")?;
        check_spd(&control_weight, "control weight")?;
        Ok(Self {
            state_weight,
            control_weight,
            epsilon,
            reference: Arc::new(reference),
        })
    }

    pub fn state_weight(&self) -> &DMatrix<f64> {
        &self.state_weight
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.control_weight
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn reference_at(&self, t: f64) -> DVector<f64> {
        (self.reference)(t)
    }
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidWeights(format!("{name} must be square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::InvalidWeights(format!("{name} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidWeights(format!(
            "{name} must be positive definite"
        )));
    }
    Ok(())
}

/// Coefficient-domain stochastic cost `K` of a propagated field under a
/// piecewise-linear control.
pub fn stochastic_cost(
    field: &CoefficientField,
    control: &ControlGrid,
    weights: &CostWeights,
    basis: &PolynomialBasis,
) -> Result<f64> {
    let p = basis.len();
    if field.n_coeffs() != p {
        return Err(Error::ShapeMismatch {
            expected: format!("{p} coefficient rows"),
            got: format!("{}", field.n_coeffs()),
        });
    }
    let n = field.state_dim();
    if weights.state_weight().nrows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("state weight of dimension {n}"),
            got: format!("{}", weights.state_weight().nrows()),
        });
    }
    if control.control_dim() != weights.control_weight().nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("control weight of dimension {}", control.control_dim()),
            got: format!("{}", weights.control_weight().nrows()),
        });
    }
    let t_end = *field.times().last().unwrap();
    if (t_end - control.horizon()).abs() > 1e-9 * control.horizon().max(1.0) {
        return Err(Error::ShapeMismatch {
            expected: format!("field over horizon {}", control.horizon()),
            got: format!("field ending at {t_end}"),
        });
    }

    let eps = weights.epsilon();
    let norms = basis.squared_norms();
    let q_mat = weights.state_weight();

    // eps * ||X~ - R~||^2_{D (x) Q} + (1 - eps) * ||X~||^2_{E (x) I} at one time.
    let integrand = |time: f64, block: &DMatrix<f64>| -> Result<f64> {
        let r = weights.reference_at(time);
        if r.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("reference of dimension {n}"),
                got: format!("{}", r.len()),
            });
        }
        let mut tracking = {
            let d0 = block.row(0).transpose() - &r;
            norms[0] * (q_mat * &d0).dot(&d0)
        };
        let mut covariance = 0.0;
        for i in 1..p {
            let xi = block.row(i).transpose();
            tracking += norms[i] * (q_mat * &xi).dot(&xi);
            covariance += norms[i] * xi.norm_squared();
        }
        Ok(eps * tracking + (1.0 - eps) * covariance)
    };

    let times = field.times();
    let mut integral = 0.0;
    let mut prev = integrand(times[0], field.block(0))?;
    for k in 1..times.len() {
        let cur = integrand(times[k], field.block(k))?;
        integral += 0.5 * (prev + cur) * (times[k] - times[k - 1]);
        prev = cur;
    }

    // Exact control energy eps * ||U||^2_{M (x) R}.
    let m = build_m(control.n_intervals(), control.delta());
    let v = control.values();
    let vm = v * &m;
    let rv = weights.control_weight() * v;
    let control_energy: f64 = vm.component_mul(&rv).sum();

    Ok(integral + eps * control_energy)
}

/// Which coefficient propagation backs the cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMode {
    Decoupled,
    Coupled,
}

/// Finite-difference scheme for the cost gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    Forward,
    Central,
}

/// Options of the projected quasi-Newton solver.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Stop when the infinity norm of the projected gradient step drops
    /// below this.
    pub grad_tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub scheme: FdScheme,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            fd_step: 1e-6,
            scheme: FdScheme::Forward,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
        }
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Projected gradient norm fell below the tolerance.
    Stationary,
    /// Iteration cap reached.
    IterationCap,
    /// No descent step could be found (gradient noise floor).
    LineSearchStalled,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Stationary => "stationary",
            StopReason::IterationCap => "iteration-cap",
            StopReason::LineSearchStalled => "line-search-stalled",
        })
    }
}

/// One accepted iterate of the solver.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub cost: f64,
    pub projected_gradient_norm: f64,
    pub control: DVector<f64>,
}

/// Result of [`StochasticOcp::solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub control: DVector<f64>,
    pub cost: f64,
    pub iterates: Vec<IterateRecord>,
    pub stop_reason: StopReason,
}

/// The reformulated deterministic OCP: dynamics, control parameterization,
/// cost weights, basis/estimator pair and propagation mode.
pub struct StochasticOcp<'a, S: ControlledSystem> {
    system: &'a S,
    template: ControlGrid,
    weights: CostWeights,
    map: EstimatorMap,
    mode: PropagationMode,
    grid: TimeGrid,
}

/// Adapter closing the controlled dynamics over a fixed policy.
struct WithPolicy<'b, S: ControlledSystem> {
    system: &'b S,
    control: &'b ControlGrid,
}

impl<S: ControlledSystem> UncertainSystem for WithPolicy<'_, S> {
    fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    fn initial_state(&self, omega: &[f64]) -> DVector<f64> {
        self.system.initial_state(omega)
    }

    fn dynamics(&self, t: f64, state: &DVector<f64>, omega: &[f64]) -> DVector<f64> {
        self.system
            .dynamics(state, &self.control.eval_clamped(t), omega)
    }
}

impl<'a, S: ControlledSystem> StochasticOcp<'a, S> {
    pub fn new(
        system: &'a S,
        template: ControlGrid,
        weights: CostWeights,
        map: EstimatorMap,
        mode: PropagationMode,
        grid: TimeGrid,
    ) -> Result<Self> {
        if system.control_dim() != template.control_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("control of dimension {}", system.control_dim()),
                got: format!("{}", template.control_dim()),
            });
        }
        if weights.state_weight().nrows() != system.state_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("state weight of dimension {}", system.state_dim()),
                got: format!("{}", weights.state_weight().nrows()),
            });
        }
        if (template.horizon() - grid.horizon()).abs() > 1e-9 * grid.horizon().max(1.0) {
            return Err(Error::ShapeMismatch {
                expected: format!("control horizon {}", grid.horizon()),
                got: format!("{}", template.horizon()),
            });
        }
        Ok(Self {
            system,
            template,
            weights,
            map,
            mode,
            grid,
        })
    }

    pub fn template(&self) -> &ControlGrid {
        &self.template
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn map(&self) -> &EstimatorMap {
        &self.map
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn control_with(&self, stacked: &DVector<f64>) -> Result<ControlGrid> {
        self.template.with_stacked(stacked)
    }

    /// Propagate under the stacked control vector and evaluate `K`.
    pub fn evaluate(&self, stacked: &DVector<f64>) -> Result<(f64, CoefficientField)> {
        let control = self.control_with(stacked)?;
        let policy = WithPolicy {
            system: self.system,
            control: &control,
        };
        let field = match self.mode {
            PropagationMode::Decoupled => propagate_decoupled(&policy, &self.map, &self.grid)?,
            PropagationMode::Coupled => propagate_coupled(&policy, &self.map, &self.grid)?,
        };
        let cost = stochastic_cost(&field, &control, &self.weights, self.map.basis())?;
        Ok((cost, field))
    }

    /// Cost with divergence mapped to `+inf` so a line search can reject the
    /// step.
    fn cost_or_inf(&self, stacked: &DVector<f64>) -> Result<f64> {
        match self.evaluate(stacked) {
            Ok((cost, _)) => Ok(if cost.is_finite() { cost } else { f64::INFINITY }),
            Err(e) if e.is_divergence() => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// Finite-difference gradient of `K`; component evaluations run in
    /// parallel.
    pub fn gradient(
        &self,
        stacked: &DVector<f64>,
        scheme: FdScheme,
        rel_step: f64,
    ) -> Result<DVector<f64>> {
        let f0 = match scheme {
            FdScheme::Forward => Some(self.cost_or_inf(stacked)?),
            FdScheme::Central => None,
        };
        let entries: Vec<Result<f64>> = (0..stacked.len())
            .into_par_iter()
            .map(|i| {
                let h = rel_step * stacked[i].abs().max(1.0);
                match scheme {
                    FdScheme::Forward => {
                        let mut up = stacked.clone();
                        up[i] += h;
                        Ok((self.cost_or_inf(&up)? - f0.unwrap()) / h)
                    }
                    FdScheme::Central => {
                        let mut up = stacked.clone();
                        let mut dn = stacked.clone();
                        up[i] += h;
                        dn[i] -= h;
                        Ok((self.cost_or_inf(&up)? - self.cost_or_inf(&dn)?) / (2.0 * h))
                    }
                }
            })
            .collect();
        let mut gradient = DVector::zeros(stacked.len());
        for (i, entry) in entries.into_iter().enumerate() {
            gradient[i] = entry?;
        }
        Ok(gradient)
    }

    /// Projected BFGS with backtracking line search. The iterate log is
    /// non-increasing in cost and feasible throughout.
    pub fn solve(&self, start: &DVector<f64>, options: &SolveOptions) -> Result<Solution> {
        if !self.template.is_feasible(start) {
            return Err(Error::InvalidControlGrid(
                "initial control guess violates the bounds".into(),
            ));
        }
        let dim = start.len();
        let mut u = start.clone();
        let mut cost = self.cost_or_inf(&u)?;
        if !cost.is_finite() {
            return Err(Error::InvalidStart);
        }
        let mut gradient = self.gradient(&u, options.scheme, options.fd_step)?;
        let mut inv_hessian = DMatrix::identity(dim, dim);
        let mut first_update = true;

        let pg_norm = |u: &DVector<f64>, g: &DVector<f64>| -> f64 {
            (u - self.template.project(&(u - g))).abs().max()
        };

        let mut iterates = vec![IterateRecord {
            cost,
            projected_gradient_norm: pg_norm(&u, &gradient),
            control: u.clone(),
        }];

        let mut stop_reason = StopReason::IterationCap;
        for _ in 0..options.max_iters {
            if pg_norm(&u, &gradient) <= options.grad_tol {
                stop_reason = StopReason::Stationary;
                break;
            }

            let mut direction = -(&inv_hessian * &gradient);
            if direction.dot(&gradient) >= 0.0 {
                direction = -gradient.clone();
            }

            // Backtracking Armijo search along the projection arc; fall back
            // to steepest descent if the quasi-Newton direction stalls.
            let mut accepted: Option<(DVector<f64>, f64)> = None;
            'directions: for dir in [direction.clone(), -gradient.clone()] {
                let mut alpha = 1.0;
                for _ in 0..options.max_backtracks {
                    let candidate = self.template.project(&(&u + alpha * &dir));
                    let step = &candidate - &u;
                    if step.abs().max() > 0.0 {
                        let trial = self.cost_or_inf(&candidate)?;
                        let decrease = options.armijo_c1 * gradient.dot(&step);
                        if trial < cost && trial <= cost + decrease {
                            accepted = Some((candidate, trial));
                            break 'directions;
                        }
                    }
                    alpha *= options.backtrack;
                }
            }

            let Some((next, next_cost)) = accepted else {
                stop_reason = StopReason::LineSearchStalled;
                break;
            };

            let next_gradient = self.gradient(&next, options.scheme, options.fd_step)?;
            let s = &next - &u;
            let y = &next_gradient - &gradient;
            let sy = s.dot(&y);
            if sy > 1e-10 * s.norm() * y.norm() {
                if first_update {
                    inv_hessian *= sy / y.norm_squared();
                    first_update = false;
                }
                let rho = 1.0 / sy;
                let hy = &inv_hessian * &y;
                let yhy = y.dot(&hy);
                // BFGS: H+ = H - rho (H y s^T + s y^T H) + rho^2 s (y^T H y) s^T + rho s s^T
                inv_hessian.ger(-rho, &hy, &s, 1.0);
                inv_hessian.ger(-rho, &s, &hy, 1.0);
                inv_hessian.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            }

            u = next;
            cost = next_cost;
            gradient = next_gradient;
            iterates.push(IterateRecord {
                cost,
                projected_gradient_norm: pg_norm(&u, &gradient),
                control: u.clone(),
            });
        }

        Ok(Solution {
            control: u,
            cost,
            iterates,
            stop_reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Distribution, ParameterSpace};
    use crate::estimation::{build_estimator, EstimatorMethod};
    use crate::quadrature::gauss_rule;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_bounds(lo: f64, hi: f64) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(1, lo), DVector::from_element(1, hi))
    }

    fn ramp_grid(n_intervals: usize, horizon: f64) -> ControlGrid {
        let (lo, hi) = scalar_bounds(-10.0, 10.0);
        let values = DMatrix::from_fn(1, n_intervals + 1, |_, k| {
            k as f64 / n_intervals as f64
        });
        ControlGrid::new(horizon, values, lo, hi).unwrap()
    }

    #[test]
    fn control_eval_interpolates_nodes() {
        let grid = ramp_grid(4, 2.0);
        let delta = grid.delta();
        for k in 0..=4 {
            let u = grid.eval(k as f64 * delta).unwrap();
            assert_abs_diff_eq!(u[0], k as f64 / 4.0, epsilon = 1e-12);
        }
        let mid = grid.eval(1.5 * delta).unwrap();
        assert_abs_diff_eq!(mid[0], (0.25 + 0.5) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn control_eval_constant_policy() {
        let (lo, hi) = scalar_bounds(-2.0, 2.0);
        let grid =
            ControlGrid::constant(3.0, 5, &DVector::from_element(1, 0.7), lo, hi).unwrap();
        for t in [0.0, 0.3, 1.7, 3.0] {
            assert_abs_diff_eq!(grid.eval(t).unwrap()[0], 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn control_eval_outside_horizon_errors() {
        let grid = ramp_grid(4, 2.0);
        assert!(matches!(
            grid.eval(-0.1),
            Err(Error::OutOfHorizon { .. })
        ));
        assert!(matches!(grid.eval(2.1), Err(Error::OutOfHorizon { .. })));
    }

    #[test]
    fn control_grid_rejects_out_of_bound_values() {
        let (lo, hi) = scalar_bounds(-1.0, 1.0);
        let values = DMatrix::from_element(1, 3, 1.5);
        assert!(ControlGrid::new(1.0, values, lo, hi).is_err());
    }

    proptest::proptest! {
        #[test]
        fn control_eval_stays_within_node_hull(
            nodes in proptest::collection::vec(-3.0_f64..3.0, 2..12),
            frac in 0.0_f64..1.0,
        ) {
            let horizon = 4.0;
            let values = DMatrix::from_fn(1, nodes.len(), |_, k| nodes[k]);
            let (lo, hi) = scalar_bounds(-3.0, 3.0);
            let grid = ControlGrid::new(horizon, values, lo, hi).unwrap();
            let u = grid.eval(frac * horizon).unwrap()[0];
            let min = nodes.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = nodes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(u >= min - 1e-12 && u <= max + 1e-12);
            // Node times interpolate exactly.
            let k = (frac * (nodes.len() - 1) as f64).floor() as usize;
            let at_node = grid.eval(k as f64 * grid.delta()).unwrap()[0];
            proptest::prop_assert!((at_node - nodes[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn m_matrix_smallest_case() {
        let m = build_m(1, 1.0);
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 6.0;
        assert!((m - expected).abs().max() < 1e-15);
    }

    #[test]
    fn constant_control_energy_is_horizon() {
        let horizon = 7.0;
        let n_t = 9;
        let m = build_m(n_t, horizon / n_t as f64);
        let u = DVector::from_element(n_t + 1, 1.0);
        assert_abs_diff_eq!((&m * &u).dot(&u), horizon, epsilon = 1e-12);
    }

    #[test]
    fn linear_ramp_energy_is_third_of_horizon() {
        let horizon = 3.0;
        let n_t = 6;
        let m = build_m(n_t, horizon / n_t as f64);
        let u = DVector::from_iterator(n_t + 1, (0..=n_t).map(|k| k as f64 / n_t as f64));
        assert_abs_diff_eq!((&m * &u).dot(&u), horizon / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn control_energy_matches_per_interval_simpson() {
        // Simpson is exact for the quadratic integrand of a piecewise-linear
        // control, giving an independent oracle for U^T M U.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let horizon = 5.0;
        let n_t = 8;
        let delta = horizon / n_t as f64;
        let m = build_m(n_t, delta);
        for _ in 0..100 {
            let u = DVector::from_fn(n_t + 1, |_, _| rng.gen_range(-3.0..3.0));
            let mut oracle = 0.0;
            for k in 0..n_t {
                let (a, b) = (u[k], u[k + 1]);
                let mid = 0.5 * (a + b);
                oracle += delta / 6.0 * (a * a + 4.0 * mid * mid + b * b);
            }
            assert_abs_diff_eq!((&m * &u).dot(&u), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn e_matrix_values() {
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis0 = PolynomialBasis::new(space.clone(), 0);
        let e0 = build_e(&basis0);
        assert_eq!(e0.nrows(), 1);
        assert_eq!(e0[(0, 0)], 0.0);

        let basis2 = PolynomialBasis::new(space, 2);
        let e2 = build_e(&basis2);
        assert_abs_diff_eq!(e2[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e2[(1, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e2[(2, 2)], 1.0 / 5.0, epsilon = 1e-15);
        assert!(e2.diagonal().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn s_matrix_identity_on_random_blocks() {
        // eps * tracking integrand + (1 - eps) * covariance integrand equals
        // the split form with weights eps Q on the mean deviation and
        // eps Q + (1 - eps) I on the higher modes.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis = PolynomialBasis::new(space, 4);
        let norms = basis.squared_norms();
        let n = 2;
        let q_mat = {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(n, n)
        };
        for &eps in &[0.1, 0.4, 1.0] {
            for _ in 0..20 {
                let block = DMatrix::from_fn(basis.len(), n, |_, _| rng.gen_range(-2.0..2.0));
                let r = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));

                let mut lhs = {
                    let d0 = block.row(0).transpose() - &r;
                    eps * norms[0] * (&q_mat * &d0).dot(&d0)
                };
                for i in 1..basis.len() {
                    let xi = block.row(i).transpose();
                    lhs += eps * norms[i] * (&q_mat * &xi).dot(&xi);
                    lhs += (1.0 - eps) * norms[i] * xi.norm_squared();
                }

                let mut rhs = {
                    let d0 = block.row(0).transpose() - &r;
                    (&q_mat * &d0).dot(&d0) * eps * norms[0]
                };
                let s_sq = eps * &q_mat + (1.0 - eps) * DMatrix::identity(n, n);
                for i in 1..basis.len() {
                    let xi = block.row(i).transpose();
                    rhs += norms[i] * (&s_sq * &xi).dot(&xi);
                }
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn perfect_tracking_with_zero_control_costs_nothing() {
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis = PolynomialBasis::new(space, 2);
        let reference = |t: f64| DVector::from_vec(vec![t.sin(), t.cos()]);
        let weights = CostWeights::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            0.5,
            reference,
        )
        .unwrap();
        let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.02).collect();
        let blocks: Vec<DMatrix<f64>> = times
            .iter()
            .map(|&t| {
                let mut b = DMatrix::zeros(basis.len(), 2);
                b.set_row(0, &reference(t).transpose());
                b
            })
            .collect();
        let field = CoefficientField::new(times, blocks);
        let (lo, hi) = scalar_bounds(-1.0, 1.0);
        let control =
            ControlGrid::constant(1.0, 4, &DVector::zeros(1), lo, hi).unwrap();
        let cost = stochastic_cost(&field, &control, &weights, &basis).unwrap();
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-14);
    }

    /// Scalar linear tracking problem with a deterministic parameter
    /// (degree-0 chaos): the cost is an exactly quadratic function of `U`.
    struct ToyOcp;

    impl ControlledSystem for ToyOcp {
        fn state_dim(&self) -> usize {
            1
        }

        fn control_dim(&self) -> usize {
            1
        }

        fn initial_state(&self, _omega: &[f64]) -> DVector<f64> {
            DVector::from_element(1, 0.5)
        }

        fn dynamics(
            &self,
            state: &DVector<f64>,
            control: &DVector<f64>,
            _omega: &[f64],
        ) -> DVector<f64> {
            DVector::from_element(1, -state[0] + control[0])
        }
    }

    fn toy_ocp(system: &ToyOcp) -> StochasticOcp<'_, ToyOcp> {
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis = PolynomialBasis::new(space.clone(), 0);
        let rule = gauss_rule(&space, 1).unwrap();
        let map = build_estimator(&basis, &rule, EstimatorMethod::Projection).unwrap();
        let weights = CostWeights::new(
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.1),
            1.0,
            |_t| DVector::from_element(1, 1.0),
        )
        .unwrap();
        let (lo, hi) = scalar_bounds(-10.0, 10.0);
        let template = ControlGrid::constant(2.0, 4, &DVector::zeros(1), lo, hi).unwrap();
        let grid = TimeGrid::new(2.0, 0.01);
        StochasticOcp::new(system, template, weights, map, PropagationMode::Decoupled, grid)
            .unwrap()
    }

    fn toy_qp_minimizer(ocp: &StochasticOcp<'_, ToyOcp>, dim: usize) -> DVector<f64> {
        // K is exactly quadratic in U, so unit-step differences recover the
        // QP data exactly (up to rounding): K(U) = 0.5 U^T H U + g^T U + c.
        let cost = |u: &DVector<f64>| ocp.evaluate(u).unwrap().0;
        let zero = DVector::zeros(dim);
        let c = cost(&zero);
        let unit = |i: usize| {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            e
        };
        let mut g = DVector::zeros(dim);
        for i in 0..dim {
            g[i] = 0.5 * (cost(&unit(i)) - cost(&(-unit(i))));
        }
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let value = cost(&(unit(i) + unit(j))) - cost(&unit(i)) - cost(&unit(j)) + c;
                h[(i, j)] = value;
                h[(j, i)] = value;
            }
        }
        h.lu().solve(&(-g)).expect("toy QP must be nonsingular")
    }

    #[test]
    fn toy_problem_matches_qp_oracle() {
        let system = ToyOcp;
        let ocp = toy_ocp(&system);
        let dim = 5;
        let oracle = toy_qp_minimizer(&ocp, dim);
        assert!(ocp.template().is_feasible(&oracle));

        let options = SolveOptions {
            scheme: FdScheme::Central,
            grad_tol: 1e-8,
            max_iters: 300,
            ..Default::default()
        };
        let solution = ocp.solve(&DVector::zeros(dim), &options).unwrap();
        assert_eq!(solution.stop_reason, StopReason::Stationary);
        let err = (&solution.control - &oracle).abs().max();
        assert!(err < 1e-4, "optimizer misses QP oracle by {err:.2e}");
    }

    #[test]
    fn solve_from_optimum_does_not_ascend() {
        let system = ToyOcp;
        let ocp = toy_ocp(&system);
        let oracle = toy_qp_minimizer(&ocp, 5);
        let start_cost = ocp.evaluate(&oracle).unwrap().0;
        let options = SolveOptions {
            scheme: FdScheme::Central,
            grad_tol: 1e-6,
            ..Default::default()
        };
        let solution = ocp.solve(&oracle, &options).unwrap();
        assert!(solution.cost <= start_cost + 1e-12);
        assert!((&solution.control - &oracle).abs().max() < 1e-5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let system = ToyOcp;
        let ocp = toy_ocp(&system);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let u = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let forward = ocp.gradient(&u, FdScheme::Forward, 1e-6).unwrap();
            let central = ocp.gradient(&u, FdScheme::Central, 1e-5).unwrap();
            let rel = (&forward - &central).norm() / central.norm();
            assert!(rel < 1e-4, "gradient schemes disagree by {rel:.2e}");
        }
    }

    #[test]
    fn iterates_descend_and_stay_feasible() {
        let system = ToyOcp;
        let ocp = toy_ocp(&system);
        let options = SolveOptions {
            scheme: FdScheme::Central,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let solution = ocp
            .solve(&DVector::from_element(5, 3.0), &options)
            .unwrap();
        for pair in solution.iterates.windows(2) {
            assert!(pair[1].cost <= pair[0].cost);
        }
        for record in &solution.iterates {
            assert!(ocp.template().is_feasible(&record.control));
        }
    }

    #[test]
    fn zero_problem_costs_nothing() {
        // Zero dynamics, zero reference, zero control.
        struct Zero;
        impl ControlledSystem for Zero {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn initial_state(&self, _omega: &[f64]) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn dynamics(
                &self,
                _state: &DVector<f64>,
                _control: &DVector<f64>,
                _omega: &[f64],
            ) -> DVector<f64> {
                DVector::zeros(1)
            }
        }
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis = PolynomialBasis::new(space.clone(), 1);
        let rule = gauss_rule(&space, 2).unwrap();
        let map = build_estimator(&basis, &rule, EstimatorMethod::Projection).unwrap();
        let weights = CostWeights::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            0.4,
            |_t| DVector::zeros(1),
        )
        .unwrap();
        let (lo, hi) = scalar_bounds(-1.0, 1.0);
        let template = ControlGrid::constant(1.0, 2, &DVector::zeros(1), lo, hi).unwrap();
        let grid = TimeGrid::new(1.0, 0.01);
        let system = Zero;
        let ocp = StochasticOcp::new(
            &system,
            template,
            weights,
            map,
            PropagationMode::Coupled,
            grid,
        )
        .unwrap();
        let (cost, _) = ocp.evaluate(&DVector::zeros(3)).unwrap();
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn invalid_start_is_reported() {
        struct Exploding;
        impl ControlledSystem for Exploding {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn initial_state(&self, _omega: &[f64]) -> DVector<f64> {
                DVector::from_element(1, 1e200)
            }
            fn dynamics(
                &self,
                state: &DVector<f64>,
                _control: &DVector<f64>,
                _omega: &[f64],
            ) -> DVector<f64> {
                state.component_mul(state)
            }
        }
        let space =
            ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap();
        let basis = PolynomialBasis::new(space.clone(), 0);
        let rule = gauss_rule(&space, 1).unwrap();
        let map = build_estimator(&basis, &rule, EstimatorMethod::Projection).unwrap();
        let weights = CostWeights::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            1.0,
            |_t| DVector::zeros(1),
        )
        .unwrap();
        let (lo, hi) = scalar_bounds(-1.0, 1.0);
        let template = ControlGrid::constant(1.0, 2, &DVector::zeros(1), lo, hi).unwrap();
        let grid = TimeGrid::new(1.0, 0.1);
        let system = Exploding;
        let ocp = StochasticOcp::new(
            &system,
            template,
            weights,
            map,
            PropagationMode::Decoupled,
            grid,
        )
        .unwrap();
        assert!(matches!(
            ocp.solve(&DVector::zeros(3), &SolveOptions::default()),
            Err(Error::InvalidStart)
        ));
    }
}
