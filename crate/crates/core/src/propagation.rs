//! Propagation of parametric uncertainty through an ODE.
//!
//! Two routes are provided. The decoupled method simulates the `q`
//! independent deterministic systems at the collocation nodes and maps the
//! stacked trajectories through the estimator `A` afterwards. The coupled
//! method integrates the coefficient-space ODE directly, replacing the state
//! inside the dynamics by its chaos reconstruction at every node. Both use
//! the same fixed-step classical Runge-Kutta integrator, so they coincide up
//! to rounding whenever `q = p` and the node simulations stay finite.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::PolynomialBasis;
use crate::error::{Error, Result};
use crate::estimation::{vandermonde, EstimatorMap};

/// An ODE whose dynamics and initial state may depend on the random
/// parameter vector.
pub trait UncertainSystem: Sync {
    fn state_dim(&self) -> usize;
    fn initial_state(&self, omega: &[f64]) -> DVector<f64>;
    fn dynamics(&self, t: f64, state: &DVector<f64>, omega: &[f64]) -> DVector<f64>;
}

/// Closure-backed [`UncertainSystem`], convenient for tests and small models.
pub struct FnSystem<H, F> {
    state_dim: usize,
    initial: H,
    dynamics: F,
}

impl<H, F> FnSystem<H, F>
where
    H: Fn(&[f64]) -> DVector<f64> + Sync,
    F: Fn(f64, &DVector<f64>, &[f64]) -> DVector<f64> + Sync,
{
    pub fn new(state_dim: usize, initial: H, dynamics: F) -> Self {
        Self {
            state_dim,
            initial,
            dynamics,
        }
    }
}

impl<H, F> UncertainSystem for FnSystem<H, F>
where
    H: Fn(&[f64]) -> DVector<f64> + Sync,
    F: Fn(f64, &DVector<f64>, &[f64]) -> DVector<f64> + Sync,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn initial_state(&self, omega: &[f64]) -> DVector<f64> {
        (self.initial)(omega)
    }

    fn dynamics(&self, t: f64, state: &DVector<f64>, omega: &[f64]) -> DVector<f64> {
        (self.dynamics)(t, state, omega)
    }
}

/// Uniform integration grid over `[0, horizon]` with an optional coarser
/// storage stride for trajectory output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    store_every: usize,
}

impl TimeGrid {
    /// Grid over `[0, horizon]` with steps of (approximately) `dt`; the
    /// actual step is `horizon / round(horizon / dt)` so the horizon is hit
    /// exactly.
    pub fn new(horizon: f64, dt: f64) -> Self {
        assert!(horizon > 0.0 && dt > 0.0, "horizon and dt must be positive");
        let steps = ((horizon / dt).round() as usize).max(1);
        Self {
            horizon,
            steps,
            store_every: 1,
        }
    }

    /// Store only every `n`-th integrator step; `n` must divide the step
    /// count so the stored grid stays uniform.
    pub fn store_every(mut self, n: usize) -> Self {
        assert!(n >= 1 && self.steps % n == 0, "stride must divide step count");
        self.store_every = n;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stride(&self) -> usize {
        self.store_every
    }

    /// Number of stored points, including both endpoints.
    pub fn n_stored(&self) -> usize {
        self.steps / self.store_every + 1
    }

    pub fn stored_times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_stored())
            .map(|k| (k * self.store_every) as f64 * dt)
            .collect()
    }
}

/// Time-sampled chaos-coefficient blocks of an `n`-dimensional state: one
/// `p x n` matrix per stored time.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    times: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
}

impl CoefficientField {
    pub fn new(times: Vec<f64>, blocks: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(times.len(), blocks.len());
        assert!(!blocks.is_empty());
        Self { times, blocks }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &DMatrix<f64> {
        &self.blocks[k]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn n_coeffs(&self) -> usize {
        self.blocks[0].nrows()
    }

    /// Mean trajectory (first coefficient row under the unit-norm constant).
    pub fn mean_trajectory(&self) -> Vec<DVector<f64>> {
        self.blocks.iter().map(|b| b.row(0).transpose()).collect()
    }

    /// Per-time mean and covariance.
    pub fn moments(
        &self,
        basis: &PolynomialBasis,
    ) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        self.blocks
            .iter()
            .map(|b| basis.moments_from_coefficients(b))
            .collect()
    }

    /// Reconstructed state trajectory at one parameter point.
    pub fn reconstruct(&self, basis: &PolynomialBasis, omega: &[f64]) -> Result<Vec<DVector<f64>>> {
        let psi = basis.eval(omega)?;
        if psi.len() != self.n_coeffs() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} coefficients", psi.len()),
                got: format!("{}", self.n_coeffs()),
            });
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| (psi.transpose() * b).transpose())
            .collect())
    }
}

/// Fixed-step classical RK4. Returns the trajectory on the storage grid and
/// fails with the divergence time as soon as the state stops being finite.
pub fn integrate_ode(
    rhs: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Vec<DVector<f64>>> {
    let dt = grid.dt();
    let mut state = x0.clone();
    if !all_finite(&state) {
        return Err(Error::Divergence { time: 0.0 });
    }
    let mut stored = Vec::with_capacity(grid.n_stored());
    stored.push(state.clone());
    for k in 0..grid.steps() {
        let t = k as f64 * dt;
        state = rk4_step(&rhs, t, &state, dt);
        if !all_finite(&state) {
            return Err(Error::Divergence { time: t + dt });
        }
        if (k + 1) % grid.stride() == 0 {
            stored.push(state.clone());
        }
    }
    Ok(stored)
}

fn rk4_step(
    rhs: &impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    t: f64,
    y: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, &(y + 0.5 * h * &k1));
    let k3 = rhs(t + 0.5 * h, &(y + 0.5 * h * &k2));
    let k4 = rhs(t + h, &(y + h * &k3));
    y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Decoupled propagation: simulate the `q` node systems independently, then
/// map the stacked trajectories through the estimator.
pub fn propagate_decoupled(
    system: &impl UncertainSystem,
    map: &EstimatorMap,
    grid: &TimeGrid,
) -> Result<CoefficientField> {
    let colloc = map.collocation();
    let q = colloc.len();
    let n = system.state_dim();

    let node_runs: Vec<Result<Vec<DVector<f64>>>> = (0..q)
        .into_par_iter()
        .map(|j| {
            let omega = colloc.node(j);
            let x0 = system.initial_state(omega);
            integrate_ode(|t, x| system.dynamics(t, x, omega), &x0, grid).map_err(|e| match e {
                Error::Divergence { time } => Error::NodeDivergence { time, node: j },
                other => other,
            })
        })
        .collect();

    let mut trajectories = Vec::with_capacity(q);
    for run in node_runs {
        trajectories.push(run?);
    }

    let times = grid.stored_times();
    let blocks = (0..times.len())
        .map(|k| {
            let mut stacked = DMatrix::zeros(q, n);
            for (j, traj) in trajectories.iter().enumerate() {
                stacked.set_row(j, &traj[k].transpose());
            }
            map.matrix() * stacked
        })
        .collect();
    Ok(CoefficientField::new(times, blocks))
}

/// Coupled propagation: integrate the coefficient ODE
/// `X~' = A [f(t, Psi(omega_j) X~, omega_j)]_j` directly.
pub fn propagate_coupled(
    system: &impl UncertainSystem,
    map: &EstimatorMap,
    grid: &TimeGrid,
) -> Result<CoefficientField> {
    let colloc = map.collocation();
    let q = colloc.len();
    let n = system.state_dim();
    let psi = vandermonde(map.basis(), colloc)?;

    // Initial coefficients from the stacked initial states.
    let mut initial = DMatrix::zeros(q, n);
    for j in 0..q {
        initial.set_row(j, &system.initial_state(colloc.node(j)).transpose());
    }
    let mut coeffs = map.matrix() * initial;

    let rhs = |t: f64, block: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let reconstructed = &psi * block;
        let mut derivs = DMatrix::zeros(q, n);
        for j in 0..q {
            let xj = reconstructed.row(j).transpose();
            let fj = system.dynamics(t, &xj, colloc.node(j));
            if !all_finite(&fj) {
                return Err(Error::NodeDivergence { time: t, node: j });
            }
            derivs.set_row(j, &fj.transpose());
        }
        Ok(map.matrix() * derivs)
    };

    let dt = grid.dt();
    let times = grid.stored_times();
    let mut blocks = Vec::with_capacity(grid.n_stored());
    blocks.push(coeffs.clone());
    for k in 0..grid.steps() {
        let t = k as f64 * dt;
        let k1 = rhs(t, &coeffs)?;
        let k2 = rhs(t + 0.5 * dt, &(&coeffs + 0.5 * dt * &k1))?;
        let k3 = rhs(t + 0.5 * dt, &(&coeffs + 0.5 * dt * &k2))?;
        let k4 = rhs(t + dt, &(&coeffs + dt * &k3))?;
        coeffs += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !all_finite_mat(&coeffs) {
            return Err(Error::Divergence { time: t + dt });
        }
        if (k + 1) % grid.stride() == 0 {
            blocks.push(coeffs.clone());
        }
    }
    Ok(CoefficientField::new(times, blocks))
}

/// Root mean squared pointwise error between the chaos-reconstructed surface
/// and a reference surface sampled at `omegas` on the field's time grid, for
/// one state component.
pub fn surface_rmse(
    field: &CoefficientField,
    basis: &PolynomialBasis,
    omegas: &[Vec<f64>],
    reference: &[Vec<DVector<f64>>],
    state_index: usize,
) -> Result<f64> {
    if omegas.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} reference trajectories", omegas.len()),
            got: format!("{}", reference.len()),
        });
    }
    let n_times = field.len();
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (omega, traj) in omegas.iter().zip(reference) {
        if traj.len() != n_times {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_times} time samples"),
                got: format!("{}", traj.len()),
            });
        }
        let psi = basis.eval(omega)?;
        for (k, x_ref) in traj.iter().enumerate() {
            let approx = psi.dot(&field.block(k).column(state_index));
            let diff = approx - x_ref[state_index];
            sum_sq += diff * diff;
            count += 1;
        }
    }
    Ok((sum_sq / count as f64).sqrt())
}
