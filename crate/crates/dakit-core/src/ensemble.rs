//! Ensembles of state vectors and their empirical moments.

use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;

/// A collection of `N >= 1` state vectors of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self, CoreError> {
        let n = members.len();
        if n == 0 {
            return Err(CoreError::Argument("ensemble needs at least one member".into()));
        }
        let d = members[0].len();
        if d == 0 {
            return Err(CoreError::Argument("ensemble members must be nonempty vectors".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if m.len() != d {
                return Err(CoreError::Argument(format!(
                    "member {i} has length {}, expected {d}",
                    m.len()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::Argument(format!("member {i} has non-finite entries")));
            }
        }
        Ok(Self { members })
    }

    /// Number of members `N`.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn member(&self, i: usize) -> &DVector<f64> {
        &self.members[i]
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<f64>> {
        self.members.iter()
    }

    pub fn into_members(self) -> Vec<DVector<f64>> {
        self.members
    }

    /// Members stacked as an `N x d` matrix, row `i` holding member `i`.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.members[i][j])
    }
}

/// Covariance normalization for [`ensemble_moments_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by `N`.
    PerMember,
    /// Divide by `N - 1`; requires `N >= 2`.
    Unbiased,
}

/// Empirical mean and covariance with the `1/N` normalization.
pub fn ensemble_moments(e: &Ensemble) -> (DVector<f64>, DMatrix<f64>) {
    ensemble_moments_with(e, Normalization::PerMember)
        .expect("per-member moments are defined for any ensemble")
}

/// Empirical mean and covariance with a selectable normalization.
pub fn ensemble_moments_with(
    e: &Ensemble,
    norm: Normalization,
) -> Result<(DVector<f64>, DMatrix<f64>), CoreError> {
    let n = e.len();
    let d = e.dim();
    let denom = match norm {
        Normalization::PerMember => n as f64,
        Normalization::Unbiased => {
            if n < 2 {
                return Err(CoreError::Argument(
                    "unbiased covariance needs at least two members".into(),
                ));
            }
            (n - 1) as f64
        }
    };
    let mut mean = DVector::zeros(d);
    for m in e.iter() {
        mean += m;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for m in e.iter() {
        let r = m - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= denom;
    Ok((mean, cov))
}

/// An ensemble with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    ensemble: Ensemble,
    weights: DVector<f64>,
}

impl WeightedEnsemble {
    pub fn new(ensemble: Ensemble, weights: DVector<f64>) -> Result<Self, CoreError> {
        if weights.len() != ensemble.len() {
            return Err(CoreError::Argument(format!(
                "{} weights for {} members",
                weights.len(),
                ensemble.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(CoreError::Argument("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::Argument(format!(
                "weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { ensemble, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(ensemble: Ensemble) -> Self {
        let n = ensemble.len();
        let weights = DVector::from_element(n, 1.0 / n as f64);
        Self { ensemble, weights }
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn member(&self, i: usize) -> &DVector<f64> {
        self.ensemble.member(i)
    }

    pub fn into_parts(self) -> (Ensemble, DVector<f64>) {
        (self.ensemble, self.weights)
    }

    /// Weighted mean and covariance `sum_i w_i (v_i - m)(v_i - m)'`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (m, &w) in self.ensemble.iter().zip(self.weights.iter()) {
            mean.axpy(w, m, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (m, &w) in self.ensemble.iter().zip(self.weights.iter()) {
            let r = m - &mean;
            cov.ger(w, &r, &r, 1.0);
        }
        (mean, cov)
    }

    /// Effective sample size `1 / sum_i w_i^2`, between 1 and N.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}
