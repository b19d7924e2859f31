//! Orthogonal polynomial bases matched to the input probability measures.
//!
//! Univariate families follow the Wiener-Askey association: Legendre
//! polynomials for uniform marginals, probabilists' Hermite polynomials for
//! Gaussian marginals. Multivariate bases are tensor products over the
//! independent dimensions, truncated at a total degree `d` and ordered graded
//! lexicographically, so the basis size is `p = C(n_omega + d, n_omega)`.
//!
//! Inner products are taken against the probability-normalized joint PDF.
//! Under that convention the constant basis function has unit norm, the Gram
//! matrix is `diag(<Psi_i^2>)` with leading entry 1, and the mean of an
//! expanded quantity is simply its first coefficient row.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};

/// Marginal distribution of one random input dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    /// Uniform on the interval `(a, b)`.
    Uniform { a: f64, b: f64 },
    /// Gaussian with the given mean and variance.
    Gaussian { mean: f64, variance: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(Error::InvalidSpace(format!(
                        "uniform marginal requires finite a < b, got ({a}, {b})"
                    )));
                }
            }
            Distribution::Gaussian { mean, variance } => {
                if !(mean.is_finite() && variance.is_finite() && variance > 0.0) {
                    return Err(Error::InvalidSpace(format!(
                        "gaussian marginal requires finite mean and variance > 0, got ({mean}, {variance})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Support of the marginal in physical units (`±inf` for Gaussian).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Uniform { a, b } => (a, b),
            Distribution::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Affine map from physical units to the canonical domain of the
    /// associated polynomial family ([-1, 1] for Legendre, standard normal
    /// for Hermite).
    pub fn to_canonical(&self, x: f64) -> f64 {
        match *self {
            Distribution::Uniform { a, b } => (2.0 * x - a - b) / (b - a),
            Distribution::Gaussian { mean, variance } => (x - mean) / variance.sqrt(),
        }
    }

    /// Inverse of [`Distribution::to_canonical`].
    pub fn from_canonical(&self, xi: f64) -> f64 {
        match *self {
            Distribution::Uniform { a, b } => 0.5 * (a + b) + 0.5 * (b - a) * xi,
            Distribution::Gaussian { mean, variance } => mean + variance.sqrt() * xi,
        }
    }

    /// Quantile function (inverse CDF) in physical units.
    pub fn quantile(&self, prob: f64) -> f64 {
        match *self {
            Distribution::Uniform { a, b } => a + prob * (b - a),
            Distribution::Gaussian { mean, variance } => {
                let std = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
                mean + variance.sqrt() * std.inverse_cdf(prob)
            }
        }
    }

    /// Draw one sample in physical units.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Uniform { a, b } => rng.gen_range(a..b),
            Distribution::Gaussian { mean, variance } => {
                let normal = rand_distr::Normal::new(mean, variance.sqrt()).unwrap();
                rng.sample(normal)
            }
        }
    }

    /// Squared norm `<Phi_n^2>` of the degree-`n` associated polynomial under
    /// the normalized marginal PDF.
    pub fn polynomial_norm_sq(&self, n: usize) -> f64 {
        match self {
            // Legendre against rho = 1/2 on [-1, 1].
            Distribution::Uniform { .. } => 1.0 / (2.0 * n as f64 + 1.0),
            // Probabilists' Hermite against the standard normal PDF.
            Distribution::Gaussian { .. } => (1..=n).map(|k| k as f64).product(),
        }
    }

    /// Parse a marginal descriptor such as `uniform:-1:1` or `gaussian:0:1`
    /// (Gaussian takes mean and variance).
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = |_| Error::UnsupportedDistribution(text.to_string());
        match parts.as_slice() {
            [tag, p1, p2] => {
                let p1: f64 = p1.parse().map_err(bad)?;
                let p2: f64 = p2.parse().map_err(bad)?;
                let dist = match tag.to_ascii_lowercase().as_str() {
                    "uniform" => Distribution::Uniform { a: p1, b: p2 },
                    "gaussian" | "normal" => Distribution::Gaussian {
                        mean: p1,
                        variance: p2,
                    },
                    other => return Err(Error::UnsupportedDistribution(other.to_string())),
                };
                dist.validate()?;
                Ok(dist)
            }
            _ => Err(Error::UnsupportedDistribution(text.to_string())),
        }
    }
}

/// Evaluate the Wiener-Askey polynomial of the given family and degree at a
/// point in physical units.
pub fn univariate_eval(family: &Distribution, degree: usize, point: f64) -> f64 {
    univariate_all(family, degree, point)[degree]
}

/// All degrees `0..=max_degree` of the associated family at one point,
/// computed by the three-term recurrence on the canonical domain.
pub fn univariate_all(family: &Distribution, max_degree: usize, point: f64) -> Vec<f64> {
    let xi = family.to_canonical(point);
    let mut values = Vec::with_capacity(max_degree + 1);
    values.push(1.0);
    if max_degree == 0 {
        return values;
    }
    values.push(xi);
    match family {
        Distribution::Uniform { .. } => {
            // (n + 1) P_{n+1} = (2n + 1) x P_n - n P_{n-1}
            for n in 1..max_degree {
                let nf = n as f64;
                let next =
                    ((2.0 * nf + 1.0) * xi * values[n] - nf * values[n - 1]) / (nf + 1.0);
                values.push(next);
            }
        }
        Distribution::Gaussian { .. } => {
            // He_{n+1} = x He_n - n He_{n-1}
            for n in 1..max_degree {
                let next = xi * values[n] - n as f64 * values[n - 1];
                values.push(next);
            }
        }
    }
    values
}

/// Independent random inputs with per-dimension marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    marginals: Vec<Distribution>,
}

impl ParameterSpace {
    pub fn new(marginals: Vec<Distribution>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidSpace(
                "parameter space needs at least one dimension".into(),
            ));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { marginals })
    }

    /// 1-D shorthand.
    pub fn univariate(marginal: Distribution) -> Result<Self> {
        Self::new(vec![marginal])
    }

    pub fn n_dims(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[Distribution] {
        &self.marginals
    }

    pub fn marginal(&self, dim: usize) -> &Distribution {
        &self.marginals[dim]
    }

    /// True when the point lies inside the joint support.
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.n_dims()
            && point.iter().zip(&self.marginals).all(|(&x, m)| {
                let (lo, hi) = m.support();
                x >= lo && x <= hi
            })
    }
}

/// Multivariate orthogonal basis of total degree `d`.
#[derive(Debug, Clone)]
pub struct PolynomialBasis {
    space: ParameterSpace,
    degree: usize,
    multi_indices: Vec<Vec<usize>>,
    norms_sq: DVector<f64>,
}

impl PolynomialBasis {
    pub fn new(space: ParameterSpace, degree: usize) -> Self {
        let multi_indices = graded_lex_indices(space.n_dims(), degree);
        let norms_sq = DVector::from_iterator(
            multi_indices.len(),
            multi_indices.iter().map(|idx| {
                idx.iter()
                    .zip(space.marginals())
                    .map(|(&n, m)| m.polynomial_norm_sq(n))
                    .product::<f64>()
            }),
        );
        Self {
            space,
            degree,
            multi_indices,
            norms_sq,
        }
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Basis size `p = C(n_omega + d, n_omega)`.
    pub fn len(&self) -> usize {
        self.multi_indices.len()
    }

    /// Multi-indices in graded lexicographic order; entry 0 is the zero index.
    pub fn multi_indices(&self) -> &[Vec<usize>] {
        &self.multi_indices
    }

    /// Squared norms `<Psi_i^2>` under the normalized joint PDF.
    pub fn squared_norms(&self) -> &DVector<f64> {
        &self.norms_sq
    }

    /// Diagonal Gram matrix `D` with `D_ii = <Psi_i^2>` and `D_11 = 1`.
    pub fn gram(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.norms_sq)
    }

    /// Evaluate all `p` basis functions at one point (physical units).
    pub fn eval(&self, point: &[f64]) -> Result<DVector<f64>> {
        if point.len() != self.space.n_dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("point of dimension {}", self.space.n_dims()),
                got: format!("dimension {}", point.len()),
            });
        }
        // Per-dimension tables of all univariate values up to `degree`.
        let tables: Vec<Vec<f64>> = point
            .iter()
            .zip(self.space.marginals())
            .map(|(&x, m)| univariate_all(m, self.degree, x))
            .collect();
        Ok(DVector::from_iterator(
            self.multi_indices.len(),
            self.multi_indices.iter().map(|idx| {
                idx.iter()
                    .enumerate()
                    .map(|(k, &n)| tables[k][n])
                    .product::<f64>()
            }),
        ))
    }

    /// First two stochastic moments of an `n`-dimensional expanded quantity
    /// from its `p x n` coefficient block: the mean vector and the covariance
    /// matrix `sum_{i>=2} <Psi_i^2> x_i x_i^T`.
    pub fn moments_from_coefficients(
        &self,
        coeffs: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.len();
        if coeffs.nrows() != p {
            return Err(Error::ShapeMismatch {
                expected: format!("{p} coefficient rows"),
                got: format!("{} rows", coeffs.nrows()),
            });
        }
        let n = coeffs.ncols();
        let mean = coeffs.row(0).transpose() * self.norms_sq[0];
        let mut cov = DMatrix::zeros(n, n);
        for i in 1..p {
            let xi = coeffs.row(i).transpose();
            cov.ger(self.norms_sq[i], &xi, &xi, 1.0);
        }
        Ok((mean, cov))
    }
}

/// All multi-indices with |i| <= degree in graded lexicographic order
/// (grade first, then lexicographic with the leading dimension weighted
/// highest).
fn graded_lex_indices(n_dims: usize, degree: usize) -> Vec<Vec<usize>> {
    fn fill(
        out: &mut Vec<Vec<usize>>,
        scratch: &mut Vec<usize>,
        dim: usize,
        remaining: usize,
        n_dims: usize,
    ) {
        if dim == n_dims - 1 {
            scratch[dim] = remaining;
            out.push(scratch.clone());
            return;
        }
        for k in (0..=remaining).rev() {
            scratch[dim] = k;
            fill(out, scratch, dim + 1, remaining - k, n_dims);
        }
    }

    let mut out = Vec::new();
    let mut scratch = vec![0usize; n_dims];
    for grade in 0..=degree {
        fill(&mut out, &mut scratch, 0, grade, n_dims);
    }
    out
}

/// Binomial coefficient, used to cross-check basis sizes.
pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    let mut acc = 1usize;
    for j in 0..k {
        acc = acc * (n - j) / (j + 1);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn canonical_uniform() -> Distribution {
        Distribution::Uniform { a: -1.0, b: 1.0 }
    }

    fn legendre_basis(degree: usize) -> PolynomialBasis {
        PolynomialBasis::new(
            ParameterSpace::univariate(canonical_uniform()).unwrap(),
            degree,
        )
    }

    #[test]
    fn univariate_constant_is_one() {
        assert_eq!(univariate_eval(&canonical_uniform(), 0, 0.7), 1.0);
    }

    #[test]
    fn univariate_degree_one_is_identity() {
        assert_eq!(univariate_eval(&canonical_uniform(), 1, 0.5), 0.5);
    }

    #[test]
    fn univariate_degree_two_legendre() {
        // P2(x) = (3x^2 - 1)/2
        assert_abs_diff_eq!(
            univariate_eval(&canonical_uniform(), 2, 0.5),
            -0.125,
            epsilon = 1e-15
        );
    }

    #[test]
    fn univariate_hermite_recurrence() {
        let g = Distribution::Gaussian {
            mean: 0.0,
            variance: 1.0,
        };
        // He_3(x) = x^3 - 3x
        let x = 0.8_f64;
        assert_abs_diff_eq!(univariate_eval(&g, 3, x), x.powi(3) - 3.0 * x, epsilon = 1e-14);
    }

    #[test]
    fn univariate_respects_affine_support_map() {
        let u = Distribution::Uniform { a: 2.0, b: 6.0 };
        // Physical 5.0 maps to canonical 0.5.
        assert_abs_diff_eq!(univariate_eval(&u, 1, 5.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn basis_eval_first_entry_is_one() {
        let basis = legendre_basis(4);
        let values = basis.eval(&[0.37]).unwrap();
        assert_eq!(values[0], 1.0);
    }

    #[test]
    fn basis_eval_univariate_legendre_values() {
        let basis = legendre_basis(2);
        let values = basis.eval(&[0.5]).unwrap();
        assert_abs_diff_eq!(values[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(values[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(values[2], -0.125, epsilon = 1e-15);
    }

    #[test]
    fn basis_eval_graded_lex_two_dims() {
        let space = ParameterSpace::new(vec![canonical_uniform(), canonical_uniform()]).unwrap();
        let basis = PolynomialBasis::new(space, 1);
        let values = basis.eval(&[0.3, -0.4]).unwrap();
        assert_eq!(values.len(), 3);
        assert_abs_diff_eq!(values[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(values[1], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(values[2], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn basis_eval_dimension_mismatch_errors() {
        let basis = legendre_basis(2);
        assert!(matches!(
            basis.eval(&[0.1, 0.2]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn squared_norms_legendre() {
        let basis = legendre_basis(2);
        let norms = basis.squared_norms();
        assert_abs_diff_eq!(norms[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(norms[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(norms[2], 1.0 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn squared_norms_hermite_are_factorials() {
        let g = Distribution::Gaussian {
            mean: 0.0,
            variance: 1.0,
        };
        let basis = PolynomialBasis::new(ParameterSpace::univariate(g).unwrap(), 4);
        assert_abs_diff_eq!(basis.squared_norms()[4], 24.0, epsilon = 1e-12);
    }

    #[test]
    fn moments_of_deterministic_coefficients() {
        let basis = legendre_basis(3);
        let mut coeffs = DMatrix::zeros(basis.len(), 2);
        coeffs[(0, 0)] = 1.5;
        coeffs[(0, 1)] = -2.0;
        let (mean, cov) = basis.moments_from_coefficients(&coeffs).unwrap();
        assert_abs_diff_eq!(mean[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(mean[1], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn moments_variance_of_first_mode() {
        let basis = legendre_basis(2);
        let mut coeffs = DMatrix::zeros(3, 1);
        coeffs[(1, 0)] = 1.0;
        let (mean, cov) = basis.moments_from_coefficients(&coeffs).unwrap();
        assert_abs_diff_eq!(mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn moments_shape_mismatch_errors() {
        let basis = legendre_basis(2);
        let coeffs = DMatrix::zeros(5, 1);
        assert!(basis.moments_from_coefficients(&coeffs).is_err());
    }

    #[test]
    fn covariance_matches_dense_grid_integration() {
        // Smooth 2-output test function of one uniform input, projected onto a
        // high-degree basis; its covariance must agree with direct quadrature
        // of the integral definition on a dense grid.
        let f = |w: f64| (1.3 * w + 0.2).sin();
        let g = |w: f64| (0.5 * w).exp();

        let degree = 12;
        let basis = legendre_basis(degree);
        // Project with a dense trapezoid rule (independent of the quadrature
        // module): coeff_i = <f, P_i> / <P_i^2> with rho = 1/2.
        let n_grid = 10_000;
        let mut coeffs = DMatrix::zeros(basis.len(), 2);
        let h = 2.0 / (n_grid as f64 - 1.0);
        for i in 0..basis.len() {
            let mut acc_f = 0.0;
            let mut acc_g = 0.0;
            for k in 0..n_grid {
                let w = -1.0 + h * k as f64;
                let psi = univariate_eval(&canonical_uniform(), i, w);
                let scale = if k == 0 || k == n_grid - 1 { 0.5 } else { 1.0 };
                acc_f += scale * f(w) * psi;
                acc_g += scale * g(w) * psi;
            }
            coeffs[(i, 0)] = acc_f * h * 0.5 / basis.squared_norms()[i];
            coeffs[(i, 1)] = acc_g * h * 0.5 / basis.squared_norms()[i];
        }
        let (_, cov) = basis.moments_from_coefficients(&coeffs).unwrap();

        // Dense-grid oracle of mean and covariance of (f, g).
        let mut mean = [0.0_f64; 2];
        let mut second = [[0.0_f64; 2]; 2];
        for k in 0..n_grid {
            let w = -1.0 + h * k as f64;
            let scale = if k == 0 || k == n_grid - 1 { 0.5 } else { 1.0 };
            let v = [f(w), g(w)];
            for r in 0..2 {
                mean[r] += scale * v[r];
                for c in 0..2 {
                    second[r][c] += scale * v[r] * v[c];
                }
            }
        }
        for r in 0..2 {
            mean[r] *= h * 0.5;
            for c in 0..2 {
                second[r][c] *= h * 0.5;
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                let oracle = second[r][c] - mean[r] * mean[c];
                assert_abs_diff_eq!(cov[(r, c)], oracle, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn basis_sizes_match_binomial() {
        for n_dims in 1..=4 {
            for degree in 0..=8 {
                let space = ParameterSpace::new(vec![canonical_uniform(); n_dims]).unwrap();
                let basis = PolynomialBasis::new(space, degree);
                assert_eq!(basis.len(), binomial(n_dims + degree, n_dims));
                // Leading index is the constant.
                assert!(basis.multi_indices()[0].iter().all(|&i| i == 0));
            }
        }
    }

    #[test]
    fn parse_rejects_unknown_family() {
        assert!(matches!(
            Distribution::parse("beta:1:2"),
            Err(Error::UnsupportedDistribution(_))
        ));
        assert!(Distribution::parse("uniform:-1:1").is_ok());
    }

    #[test]
    fn uniform_requires_ordered_bounds() {
        assert!(Distribution::Uniform { a: 1.0, b: -1.0 }.validate().is_err());
    }
}
