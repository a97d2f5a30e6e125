//! Regression of one-step model error onto state features.
//!
//! Given pairs of a state and the increment the reference dynamics failed
//! to explain, fits a linear-in-features correction by ridge-regularized
//! least squares. The fitted map composes additively with the reference
//! dynamics.

use std::rc::Rc;

use dakit_core::CoreError;
use nalgebra::{Cholesky, DMatrix, DVector};

type Feature = Rc<dyn Fn(&DVector<f64>) -> f64>;

/// Feature map applied to the state before the linear fit.
#[derive(Clone)]
pub enum FeatureBasis {
    /// The state itself.
    Linear,
    /// A constant one followed by the state.
    Affine,
    /// Arbitrary scalar features.
    Custom(Vec<Feature>),
}

impl FeatureBasis {
    pub fn len(&self, state_dim: usize) -> usize {
        match self {
            FeatureBasis::Linear => state_dim,
            FeatureBasis::Affine => state_dim + 1,
            FeatureBasis::Custom(fs) => fs.len(),
        }
    }

    pub fn is_empty(&self, state_dim: usize) -> bool {
        self.len(state_dim) == 0
    }

    pub fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            FeatureBasis::Linear => v.clone(),
            FeatureBasis::Affine => {
                let mut phi = DVector::zeros(v.len() + 1);
                phi[0] = 1.0;
                phi.rows_mut(1, v.len()).copy_from(v);
                phi
            }
            FeatureBasis::Custom(fs) => DVector::from_fn(fs.len(), |i, _| fs[i](v)),
        }
    }
}

/// Least-squares fit of increments onto features.
///
/// Returns the coefficient matrix `W` minimizing
/// `sum_j |delta_j - W phi(v_j)|^2 + ridge |W|^2`, so the fitted correction
/// at a state `v` is `W * features.eval(v)`. With `ridge = 0` a
/// rank-deficient feature set is an error rather than an arbitrary
/// pseudoinverse choice.
pub fn learn_increment_correction(
    pairs: &[(DVector<f64>, DVector<f64>)],
    features: &FeatureBasis,
    ridge: f64,
) -> Result<DMatrix<f64>, CoreError> {
    if pairs.is_empty() {
        return Err(CoreError::Argument(
            "at least one state-increment pair is required".into(),
        ));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(CoreError::Argument(format!(
            "ridge weight must be finite and nonnegative, got {ridge}"
        )));
    }
    let state_dim = pairs[0].0.len();
    let incr_dim = pairs[0].1.len();
    if pairs
        .iter()
        .any(|(v, dv)| v.len() != state_dim || dv.len() != incr_dim)
    {
        return Err(CoreError::Argument(
            "state-increment pairs must share dimensions".into(),
        ));
    }
    let p = features.len(state_dim);
    if p == 0 {
        return Err(CoreError::Argument("the feature basis is empty".into()));
    }

    let mut gram = DMatrix::<f64>::identity(p, p) * ridge;
    let mut cross = DMatrix::<f64>::zeros(incr_dim, p);
    for (v, dv) in pairs {
        let phi = features.eval(v);
        gram += &phi * phi.transpose();
        cross += dv * phi.transpose();
    }
    let chol = Cholesky::new(gram).ok_or_else(|| {
        CoreError::Numeric(
            "the feature normal matrix is singular; add ridge regularization".into(),
        )
    })?;
    Ok(chol.solve(&cross.transpose()).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn an_exact_linear_error_is_recovered_exactly() {
        let w_true = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, -0.3]);
        let pairs: Vec<_> = (0..12)
            .map(|i| {
                let v = DVector::from_fn(2, |r, _| ((i * 2 + r + 1) as f64 * 0.713).sin());
                let dv = &w_true * &v;
                (v, dv)
            })
            .collect();
        let w = learn_increment_correction(&pairs, &FeatureBasis::Linear, 0.0).unwrap();
        assert!((w - w_true).amax() <= 1e-12);
    }

    #[test]
    fn affine_features_absorb_a_constant_offset() {
        let pairs: Vec<_> = (0..8)
            .map(|i| {
                let v = DVector::from_element(1, (i as f64 * 0.917).cos());
                let dv = DVector::from_element(1, 0.4 + 0.25 * v[0]);
                (v, dv)
            })
            .collect();
        let w = learn_increment_correction(&pairs, &FeatureBasis::Affine, 0.0).unwrap();
        assert!((w[(0, 0)] - 0.4).abs() <= 1e-12);
        assert!((w[(0, 1)] - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn duplicated_features_without_ridge_are_singular() {
        let f: Feature = Rc::new(|v: &DVector<f64>| v[0]);
        let basis = FeatureBasis::Custom(vec![Rc::clone(&f), f]);
        let pairs = vec![
            (DVector::from_element(1, 1.0), DVector::from_element(1, 0.5)),
            (DVector::from_element(1, 2.0), DVector::from_element(1, 1.0)),
        ];
        assert!(matches!(
            learn_increment_correction(&pairs, &basis, 0.0).unwrap_err(),
            CoreError::Numeric(_)
        ));
        assert!(learn_increment_correction(&pairs, &basis, 1e-8).is_ok());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(learn_increment_correction(&[], &FeatureBasis::Linear, 0.0).is_err());
        let pairs = vec![(DVector::zeros(2), DVector::zeros(2))];
        assert!(learn_increment_correction(&pairs, &FeatureBasis::Linear, -1.0).is_err());
        assert!(learn_increment_correction(&pairs, &FeatureBasis::Linear, f64::NAN).is_err());
        assert!(learn_increment_correction(&pairs, &FeatureBasis::Custom(vec![]), 0.0).is_err());
        let ragged = vec![
            (DVector::zeros(2), DVector::zeros(2)),
            (DVector::zeros(3), DVector::zeros(2)),
        ];
        assert!(learn_increment_correction(&ragged, &FeatureBasis::Linear, 0.0).is_err());
    }
}
