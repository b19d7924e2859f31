//! Sampling-based reference oracle: Monte Carlo and dense-grid ensembles of
//! the uncertain ODE, with empirical moments and confidence bands. The gPC
//! machinery is validated against these ensembles.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::ParameterSpace;
use crate::error::{Error, Result};
use crate::propagation::{integrate_ode, TimeGrid, UncertainSystem};
use crate::quadrature::{design_nodes, DesignMethod};

/// How the sample points are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Seeded pseudo-random draws from the joint distribution.
    MonteCarlo,
    /// Deterministic endpoint-inclusive grid over the support.
    Grid,
}

/// Per-sample state trajectories on a common time grid. Diverged samples are
/// kept in the ensemble with an empty trajectory slot.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    omegas: Vec<Vec<f64>>,
    trajectories: Vec<Option<Vec<DVector<f64>>>>,
    times: Vec<f64>,
    mode: SampleMode,
    seed: u64,
}

impl SampleEnsemble {
    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn omegas(&self) -> &[Vec<f64>] {
        &self.omegas
    }

    pub fn trajectory(&self, j: usize) -> Option<&Vec<DVector<f64>>> {
        self.trajectories[j].as_ref()
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_diverged(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_none()).count()
    }

    /// Sample points and trajectories of the non-divergent samples.
    pub fn surviving(&self) -> (Vec<Vec<f64>>, Vec<Vec<DVector<f64>>>) {
        let mut omegas = Vec::new();
        let mut trajectories = Vec::new();
        for (omega, traj) in self.omegas.iter().zip(&self.trajectories) {
            if let Some(t) = traj {
                omegas.push(omega.clone());
                trajectories.push(t.clone());
            }
        }
        (omegas, trajectories)
    }
}

/// Simulate `n` samples of the uncertain ODE. Deterministic for a given
/// seed and mode; grid mode ignores the seed.
pub fn sample_ensemble(
    system: &impl UncertainSystem,
    space: &ParameterSpace,
    grid: &TimeGrid,
    n: usize,
    mode: SampleMode,
    seed: u64,
) -> SampleEnsemble {
    assert!(n >= 2, "an ensemble needs at least two samples");
    let omegas: Vec<Vec<f64>> = match mode {
        SampleMode::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    space
                        .marginals()
                        .iter()
                        .map(|m| m.sample(&mut rng))
                        .collect()
                })
                .collect()
        }
        SampleMode::Grid => design_nodes(space, n, DesignMethod::UniformGrid, seed)
            .nodes()
            .to_vec(),
    };

    let trajectories: Vec<Option<Vec<DVector<f64>>>> = omegas
        .par_iter()
        .map(|omega| {
            let x0 = system.initial_state(omega);
            integrate_ode(|t, x| system.dynamics(t, x, omega), &x0, grid).ok()
        })
        .collect();

    SampleEnsemble {
        omegas,
        trajectories,
        times: grid.stored_times(),
        mode,
        seed,
    }
}

/// Empirical moments and percentile band of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleMoments {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    /// Lower percentile band edge per time.
    pub lower: Vec<DVector<f64>>,
    /// Upper percentile band edge per time.
    pub upper: Vec<DVector<f64>>,
}

/// Unbiased sample mean/covariance per time plus the empirical two-sided
/// band covering `band` probability mass (0.99 gives the 0.5%/99.5% band).
pub fn ensemble_moments(ensemble: &SampleEnsemble, band: f64) -> Result<EnsembleMoments> {
    assert!(band > 0.0 && band < 1.0, "band must lie in (0, 1)");
    let survivors: Vec<&Vec<DVector<f64>>> = ensemble
        .trajectories
        .iter()
        .flatten()
        .collect();
    if survivors.len() < 2 {
        return Err(Error::EmptyEnsemble(format!(
            "{} of {} samples usable",
            survivors.len(),
            ensemble.len()
        )));
    }
    let n = survivors.len();
    let n_times = ensemble.times.len();
    let dim = survivors[0][0].len();
    let lower_p = 0.5 * (1.0 - band);
    let upper_p = 1.0 - lower_p;

    let mut mean = Vec::with_capacity(n_times);
    let mut covariance = Vec::with_capacity(n_times);
    let mut lower = Vec::with_capacity(n_times);
    let mut upper = Vec::with_capacity(n_times);
    let mut scratch = vec![0.0_f64; n];

    for k in 0..n_times {
        let mut mu = DVector::zeros(dim);
        for traj in &survivors {
            mu += &traj[k];
        }
        mu /= n as f64;

        let mut cov = DMatrix::zeros(dim, dim);
        for traj in &survivors {
            let d = &traj[k] - &mu;
            cov.ger(1.0 / (n as f64 - 1.0), &d, &d, 1.0);
        }

        let mut lo = DVector::zeros(dim);
        let mut hi = DVector::zeros(dim);
        for c in 0..dim {
            for (s, traj) in survivors.iter().enumerate() {
                scratch[s] = traj[k][c];
            }
            scratch.sort_by(f64::total_cmp);
            lo[c] = quantile_sorted(&scratch, lower_p);
            hi[c] = quantile_sorted(&scratch, upper_p);
        }

        mean.push(mu);
        covariance.push(cov);
        lower.push(lo);
        upper.push(hi);
    }

    Ok(EnsembleMoments {
        times: ensemble.times.clone(),
        mean,
        covariance,
        lower,
        upper,
    })
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
