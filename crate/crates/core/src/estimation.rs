//! Chaos-coefficient estimators.
//!
//! Every non-intrusive estimator here is an affine map `A` from the `q`
//! collocation evaluations to the `p` chaos coefficients:
//!
//! * projection (PM): `A = D^-1 Psi^T W`, the quadrature approximation of the
//!   Galerkin projection (needs a weighted rule);
//! * least squares (LS): `A = (Psi^T Psi)^-1 Psi^T`, plain regression on any
//!   node design;
//! * generalised least squares (GLS): `A = (Psi^T W Psi)^-1 Psi^T W`.
//!
//! With a Gauss rule exact to degree `2d` the identity `Psi^T W Psi = D`
//! makes PM and GLS coincide, and all three collapse to `Psi^-1` when
//! `q = p`. Factorizations go through the SVD rather than the normal
//! equations; Vandermonde matrices at high degree are too ill-conditioned
//! for the latter.

use nalgebra::{DMatrix, DVector};

use crate::basis::PolynomialBasis;
use crate::error::{Error, Result};
use crate::quadrature::CollocationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMethod {
    /// Quadrature projection onto the basis (PM).
    Projection,
    /// Ordinary least squares on a weightless design (LS).
    LeastSquares,
    /// Quadrature-weighted least squares (GLS).
    GeneralizedLeastSquares,
}

impl std::fmt::Display for EstimatorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorMethod::Projection => "pm",
            EstimatorMethod::LeastSquares => "ls",
            EstimatorMethod::GeneralizedLeastSquares => "gls",
        })
    }
}

/// The affine coefficient map `X~ = A X^` together with the basis and
/// collocation set it was built from.
#[derive(Debug, Clone)]
pub struct EstimatorMap {
    method: EstimatorMethod,
    matrix: DMatrix<f64>,
    basis: PolynomialBasis,
    colloc: CollocationSet,
}

impl EstimatorMap {
    pub fn method(&self) -> EstimatorMethod {
        self.method
    }

    /// The `p x q` map applied per state dimension.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn collocation(&self) -> &CollocationSet {
        &self.colloc
    }

    /// Apply the map to a `q x n` block of collocation evaluations, giving
    /// the `p x n` coefficient block.
    pub fn estimate(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if samples.nrows() != self.colloc.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} sample rows", self.colloc.len()),
                got: format!("{} rows", samples.nrows()),
            });
        }
        Ok(&self.matrix * samples)
    }
}

/// Vandermonde-type matrix with `Psi_ij = Psi_j(omega_i)`.
pub fn vandermonde(basis: &PolynomialBasis, colloc: &CollocationSet) -> Result<DMatrix<f64>> {
    let mut psi = DMatrix::zeros(colloc.len(), basis.len());
    for (j, node) in colloc.nodes().iter().enumerate() {
        psi.set_row(j, &basis.eval(node)?.transpose());
    }
    Ok(psi)
}

/// Build the coefficient map for the chosen method.
pub fn build_estimator(
    basis: &PolynomialBasis,
    colloc: &CollocationSet,
    method: EstimatorMethod,
) -> Result<EstimatorMap> {
    let (q, p) = (colloc.len(), basis.len());
    if q < p {
        return Err(Error::IllPosedDesign(format!(
            "{q} collocation points cannot determine {p} coefficients"
        )));
    }
    let psi = vandermonde(basis, colloc)?;
    check_full_column_rank(&psi)?;

    let matrix = match method {
        EstimatorMethod::Projection => {
            let weights = colloc
                .weights()
                .ok_or(Error::MissingWeights("projection estimator"))?;
            let mut a = psi.transpose();
            for (j, &w) in weights.iter().enumerate() {
                a.column_mut(j).scale_mut(w);
            }
            for (i, &norm) in basis.squared_norms().iter().enumerate() {
                a.row_mut(i).scale_mut(1.0 / norm);
            }
            a
        }
        EstimatorMethod::LeastSquares => pseudo_inverse(&psi)?,
        EstimatorMethod::GeneralizedLeastSquares => {
            let weights = colloc
                .weights()
                .ok_or(Error::MissingWeights("generalised least squares"))?;
            let sqrt_w = DVector::from_iterator(q, weights.iter().map(|w| w.sqrt()));
            let mut scaled = psi.clone();
            for (j, &sw) in sqrt_w.iter().enumerate() {
                scaled.row_mut(j).scale_mut(sw);
            }
            let mut a = pseudo_inverse(&scaled)?;
            for (j, &sw) in sqrt_w.iter().enumerate() {
                a.column_mut(j).scale_mut(sw);
            }
            a
        }
    };

    Ok(EstimatorMap {
        method,
        matrix,
        basis: basis.clone(),
        colloc: colloc.clone(),
    })
}

fn check_full_column_rank(psi: &DMatrix<f64>) -> Result<()> {
    let svd = psi.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let tol = psi.nrows().max(psi.ncols()) as f64 * f64::EPSILON * max_sv;
    if !(min_sv > tol) {
        return Err(Error::IllPosedDesign(format!(
            "design matrix is rank deficient (sigma_min = {min_sv:.3e}, sigma_max = {max_sv:.3e})"
        )));
    }
    Ok(())
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * m.norm();
    m.clone()
        .pseudo_inverse(tol)
        .map_err(|e| Error::IllPosedDesign(e.to_string()))
}
