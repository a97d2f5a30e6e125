//! Gaussian distributions with validated covariances, sampling, and the
//! linear-Gaussian posterior update.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::CoreError;
use crate::rng::RngStream;

/// Relative symmetry slack accepted by [`Gaussian::new`].
const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue floor, relative to the trace, below which a covariance is
/// rejected as indefinite.
const PSD_TOL: f64 = 1e-10;

/// A multivariate normal distribution `N(mean, cov)`.
///
/// Construction validates the covariance: it must be symmetric up to
/// `1e-12 * (1 + max|cov|)` and its smallest eigenvalue must not fall below
/// `-1e-10 * trace(cov)`. The stored matrix is the symmetrized `(C + C')/2`,
/// so downstream code can rely on exact symmetry. Semidefinite covariances
/// (including zero) are legal; strict positive definiteness is only required
/// by operations that invert, which report a numeric error otherwise.
///
/// Serialized form is `{"mean": [...], "cov": [[...], ...]}` with row-major
/// covariance rows; deserialization re-runs the validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Validates and symmetrizes, then wraps the pair.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, CoreError> {
        let d = mean.len();
        if d == 0 {
            return Err(CoreError::Argument("gaussian dimension must be at least 1".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(CoreError::Argument(format!(
                "covariance is {}x{} but the mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|x| !x.is_finite()) || cov.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Argument("gaussian parameters must be finite".into()));
        }
        let scale = 1.0 + cov.amax();
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale {
            return Err(CoreError::Argument(format!(
                "covariance asymmetry {asym:.3e} exceeds {:.3e}",
                SYMMETRY_TOL * scale
            )));
        }
        let cov = symmetrize(&cov);
        let min_eig = SymmetricEigen::new(cov.clone())
            .eigenvalues
            .min();
        if min_eig < -PSD_TOL * cov.trace() {
            return Err(CoreError::Argument(format!(
                "covariance has eigenvalue {min_eig:.3e}, below the semidefiniteness floor"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Standard normal `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    /// Point mass at `mean` (zero covariance).
    pub fn dirac(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }

    /// Log density at `x`. Requires a positive definite covariance.
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64, CoreError> {
        if x.len() != self.dim() {
            return Err(CoreError::Argument(format!(
                "point has length {}, distribution has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let chol = Cholesky::new(self.cov.clone()).ok_or_else(|| {
            CoreError::Numeric("covariance is not positive definite; log density undefined".into())
        })?;
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
        let r = x - &self.mean;
        let quad = r.dot(&chol.solve(&r));
        let d = self.dim() as f64;
        Ok(-0.5 * (quad + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = CoreError;

    fn try_from(repr: GaussianRepr) -> Result<Self, CoreError> {
        let d = repr.mean.len();
        if repr.cov.len() != d || repr.cov.iter().any(|row| row.len() != d) {
            return Err(CoreError::Format(format!(
                "covariance rows do not form a {d}x{d} matrix"
            )));
        }
        let mean = DVector::from_vec(repr.mean);
        let cov = DMatrix::from_fn(d, d, |i, j| repr.cov[i][j]);
        Gaussian::new(mean, cov)
    }
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        let d = g.dim();
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| g.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// A factor `F` with `F F' = cov`, for sampling and noise injection.
///
/// Uses the Cholesky factor when `cov` is positive definite; otherwise falls
/// back to an eigendecomposition with negative eigenvalues clamped to zero.
/// Matrices with an eigenvalue below `-1e-10 * trace` are rejected.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, CoreError> {
    if cov.nrows() != cov.ncols() {
        return Err(CoreError::Argument(format!(
            "factor target is {}x{}, not square",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok(chol.unpack());
    }
    let eig = SymmetricEigen::new(symmetrize(cov));
    let floor = -PSD_TOL * cov.trace().max(0.0);
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        return Err(CoreError::Numeric(format!(
            "matrix is indefinite: eigenvalue {:.3e} below {floor:.3e}",
            eig.eigenvalues.min()
        )));
    }
    let roots = DVector::from_iterator(
        cov.nrows(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Draws `n` independent samples, one ensemble member per draw.
///
/// Member `i` consumes the derived stream `rng.index(i)`, so the result is
/// independent of evaluation order and safe to parallelize.
pub fn gaussian_sample(g: &Gaussian, n: usize, rng: &RngStream) -> Result<Ensemble, CoreError> {
    let f = psd_factor(g.cov())?;
    let members: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let z = rng.index(i as u64).normal_vector(g.dim());
            g.mean() + &f * z
        })
        .collect();
    Ensemble::new(members)
}

/// Posterior of a Gaussian prior under a linear observation `y = L v + eta`,
/// `eta ~ N(0, gamma)`.
///
/// Information form: the posterior precision is `C^-1 = Chat^-1 + L' G^-1 L`
/// and the posterior mean solves `C^-1 m = L' G^-1 y + Chat^-1 m_prior`.
/// With `L = 0` the prior is returned unchanged.
pub fn gaussian_posterior_linear(
    prior: &Gaussian,
    l: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<Gaussian, CoreError> {
    let d = prior.dim();
    let k = y.len();
    if l.nrows() != k || l.ncols() != d {
        return Err(CoreError::Argument(format!(
            "observation matrix is {}x{}, expected {k}x{d}",
            l.nrows(),
            l.ncols()
        )));
    }
    if gamma.nrows() != k || gamma.ncols() != k {
        return Err(CoreError::Argument(format!(
            "noise covariance is {}x{}, expected {k}x{k}",
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    let gamma_chol = Cholesky::new(gamma.clone()).ok_or_else(|| {
        CoreError::Numeric("observation noise covariance is not positive definite".into())
    })?;
    let prior_chol = Cholesky::new(prior.cov().clone()).ok_or_else(|| {
        CoreError::Numeric("prior covariance is not positive definite".into())
    })?;
    let prior_precision = prior_chol.inverse();
    let precision = &prior_precision + l.transpose() * gamma_chol.solve(l);
    let rhs = l.transpose() * gamma_chol.solve(y) + &prior_precision * prior.mean();
    let precision_chol = Cholesky::new(symmetrize(&precision)).ok_or_else(|| {
        let eigs = SymmetricEigen::new(symmetrize(&precision)).eigenvalues;
        CoreError::Numeric(format!(
            "posterior precision is singular: eigenvalues in [{:.3e}, {:.3e}]",
            eigs.min(),
            eigs.max()
        ))
    })?;
    let mean = precision_chol.solve(&rhs);
    let cov = symmetrize(&precision_chol.inverse());
    Gaussian::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_asymmetry_beyond_tolerance() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2 + 1e-6, 1.0]);
        assert!(Gaussian::new(mean, cov).is_err());
    }

    #[test]
    fn symmetrizes_within_tolerance() {
        let mean = DVector::zeros(2);
        let eps = 1e-13;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2 + eps, 1.0]);
        let g = Gaussian::new(mean, cov).unwrap();
        assert_eq!(g.cov()[(0, 1)], g.cov()[(1, 0)]);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Gaussian::new(mean, cov).is_err());
    }

    #[test]
    fn dirac_has_zero_covariance() {
        let g = Gaussian::dirac(DVector::from_vec(vec![3.0, -1.0]));
        assert_eq!(g.cov().amax(), 0.0);
    }

    #[test]
    fn json_round_trip_preserves_bits() {
        let g = Gaussian::new(
            DVector::from_vec(vec![0.1, -2.5]),
            DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.9]),
        )
        .unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: Gaussian = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn json_rejects_bad_covariance() {
        let text = r#"{"mean":[0.0,0.0],"cov":[[1.0,2.0],[2.0,1.0]]}"#;
        assert!(serde_json::from_str::<Gaussian>(text).is_err());
    }

    #[test]
    fn logpdf_matches_standard_normal_constant() {
        let g = Gaussian::standard(1);
        let lp = g.logpdf(&DVector::from_vec(vec![0.0])).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-15);
    }

    #[test]
    fn psd_factor_reconstructs_rank_deficient_matrix() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&cov).unwrap();
        let back = &f * f.transpose();
        assert!((back - cov).amax() < 1e-12);
    }
}
