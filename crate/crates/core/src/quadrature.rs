//! Collocation sets: Gauss quadrature rules matched to the input
//! distributions and weightless design-of-experiment node sets for the
//! regression estimators.
//!
//! Gauss nodes and weights come from the Golub-Welsch eigendecomposition of
//! the symmetric tridiagonal recurrence matrix, so a rule with `m` points per
//! dimension integrates polynomials of per-dimension degree `2m - 1` exactly
//! against the normalized joint PDF. Tensor products give `q = m^{n_omega}`
//! points in total; weights always sum to one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{Distribution, ParameterSpace};
use crate::error::{Error, Result};

/// Weightless node designs for the least-squares estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignMethod {
    /// Endpoint-inclusive uniform grid over the support.
    UniformGrid,
    /// Seeded Latin hypercube, one node per equal-probability stratum.
    LatinHypercube,
}

/// How a collocation set was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GaussTensor,
    UniformGrid,
    LatinHypercube,
    Custom,
}

/// A set of `q` collocation points in physical units, with quadrature
/// weights when the set is a Gauss rule.
#[derive(Debug, Clone)]
pub struct CollocationSet {
    nodes: Vec<Vec<f64>>,
    weights: Option<DVector<f64>>,
    provenance: Provenance,
}

impl CollocationSet {
    /// Wrap user-supplied nodes (and optional weights) as a collocation set.
    pub fn new(nodes: Vec<Vec<f64>>, weights: Option<DVector<f64>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::IllPosedDesign("empty node set".into()));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|n| n.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("all nodes of dimension {dim}"),
                got: "ragged node list".into(),
            });
        }
        if let Some(w) = &weights {
            if w.len() != nodes.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} weights", nodes.len()),
                    got: format!("{}", w.len()),
                });
            }
            if w.iter().any(|&wj| wj <= 0.0) || (w.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::IllPosedDesign(
                    "weights must be positive and sum to one".into(),
                ));
            }
        }
        Ok(Self {
            nodes,
            weights,
            provenance: Provenance::Custom,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j]
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Forget the weights, reusing the nodes as a regression design.
    pub fn weightless(&self) -> CollocationSet {
        CollocationSet {
            nodes: self.nodes.clone(),
            weights: None,
            provenance: self.provenance,
        }
    }

    /// Quadrature approximation of `E[f]`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let weights = self
            .weights
            .as_ref()
            .ok_or(Error::MissingWeights("integrate"))?;
        Ok(self
            .nodes
            .iter()
            .zip(weights.iter())
            .map(|(node, &w)| f(node) * w)
            .sum())
    }
}

/// Tensor-product Gauss rule with `points_per_dim` nodes in every dimension,
/// exact for per-dimension degree `2 * points_per_dim - 1`.
pub fn gauss_rule(space: &ParameterSpace, points_per_dim: usize) -> Result<CollocationSet> {
    assert!(points_per_dim >= 1, "Gauss rule needs at least one point");
    let per_dim: Vec<(Vec<f64>, Vec<f64>)> = space
        .marginals()
        .iter()
        .map(|m| {
            let (xi, w) = gauss_canonical(m, points_per_dim);
            let x = xi.iter().map(|&v| m.from_canonical(v)).collect();
            (x, w)
        })
        .collect();

    let n_dims = space.n_dims();
    let q = points_per_dim.pow(n_dims as u32);
    let mut nodes = Vec::with_capacity(q);
    let mut weights = Vec::with_capacity(q);
    let mut odometer = vec![0usize; n_dims];
    loop {
        let node: Vec<f64> = (0..n_dims).map(|k| per_dim[k].0[odometer[k]]).collect();
        let weight: f64 = (0..n_dims).map(|k| per_dim[k].1[odometer[k]]).product();
        nodes.push(node);
        weights.push(weight);
        // Advance last dimension fastest.
        let mut dim = n_dims;
        loop {
            if dim == 0 {
                return Ok(CollocationSet {
                    nodes,
                    weights: Some(DVector::from_vec(weights)),
                    provenance: Provenance::GaussTensor,
                });
            }
            dim -= 1;
            odometer[dim] += 1;
            if odometer[dim] < points_per_dim {
                break;
            }
            odometer[dim] = 0;
        }
    }
}

/// Univariate Gauss nodes/weights on the canonical domain by Golub-Welsch.
/// Weights sum to one because the measure is probability-normalized.
fn gauss_canonical(family: &Distribution, m: usize) -> (Vec<f64>, Vec<f64>) {
    // Recurrence coefficients beta_k of the monic orthogonal polynomials;
    // both families are symmetric, so all alpha_k vanish.
    let beta = |k: usize| -> f64 {
        let kf = k as f64;
        match family {
            Distribution::Uniform { .. } => kf * kf / (4.0 * kf * kf - 1.0),
            Distribution::Gaussian { .. } => kf,
        }
    };
    let mut jacobi = DMatrix::zeros(m, m);
    for k in 1..m {
        let off = beta(k).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eigen = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let first = eigen.eigenvectors[(0, i)];
            (eigen.eigenvalues[i], first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `q` weightless nodes covering the support, for use with the LS/GLS
/// estimators. Deterministic for a given seed.
pub fn design_nodes(
    space: &ParameterSpace,
    q: usize,
    method: DesignMethod,
    seed: u64,
) -> CollocationSet {
    assert!(q >= 1, "design needs at least one node");
    match method {
        DesignMethod::UniformGrid => {
            let n_dims = space.n_dims();
            // Smallest per-dimension count whose tensor grid reaches q nodes.
            let mut m = 1usize;
            while m.pow(n_dims as u32) < q {
                m += 1;
            }
            let axes: Vec<Vec<f64>> = space.marginals().iter().map(|d| grid_axis(d, m)).collect();
            let mut nodes = Vec::with_capacity(q);
            let mut odometer = vec![0usize; n_dims];
            'outer: loop {
                nodes.push((0..n_dims).map(|k| axes[k][odometer[k]]).collect());
                if nodes.len() == q {
                    break;
                }
                let mut dim = n_dims;
                loop {
                    if dim == 0 {
                        break 'outer;
                    }
                    dim -= 1;
                    odometer[dim] += 1;
                    if odometer[dim] < m {
                        break;
                    }
                    odometer[dim] = 0;
                }
            }
            CollocationSet {
                nodes,
                weights: None,
                provenance: Provenance::UniformGrid,
            }
        }
        DesignMethod::LatinHypercube => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_dims = space.n_dims();
            let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_dims);
            for dim in 0..n_dims {
                // One node per equal-probability stratum, shuffled.
                let mut strata: Vec<usize> = (0..q).collect();
                for i in (1..q).rev() {
                    let j = rng.gen_range(0..=i);
                    strata.swap(i, j);
                }
                let marginal = space.marginal(dim);
                columns.push(
                    strata
                        .iter()
                        .map(|&s| {
                            let u: f64 = rng.gen();
                            marginal.quantile((s as f64 + u) / q as f64)
                        })
                        .collect(),
                );
            }
            let nodes = (0..q)
                .map(|j| (0..n_dims).map(|k| columns[k][j]).collect())
                .collect();
            CollocationSet {
                nodes,
                weights: None,
                provenance: Provenance::LatinHypercube,
            }
        }
    }
}

/// Endpoint-inclusive axis of `m` points; unbounded supports are covered
/// through interior quantiles.
fn grid_axis(marginal: &Distribution, m: usize) -> Vec<f64> {
    let (lo, hi) = marginal.support();
    if m == 1 {
        return vec![marginal.quantile(0.5)];
    }
    if lo.is_finite() && hi.is_finite() {
        (0..m)
            .map(|j| lo + (hi - lo) * j as f64 / (m as f64 - 1.0))
            .collect()
    } else {
        (0..m)
            .map(|j| marginal.quantile((j as f64 + 1.0) / (m as f64 + 1.0)))
            .collect()
    }
}
