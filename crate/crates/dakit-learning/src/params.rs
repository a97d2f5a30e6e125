//! Flat parameter vectors with a block layout and a log-Cholesky encoding
//! for covariance blocks.
//!
//! A covariance is stored as its Cholesky factor, row by row over the lower
//! triangle, with the diagonal entries replaced by their logarithms. Any
//! real vector therefore decodes to a positive definite matrix, which keeps
//! gradient updates unconstrained.

use dakit_core::CoreError;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Entries needed to encode a `d x d` covariance.
pub fn triangle_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Encodes a positive definite matrix as a log-Cholesky coordinate vector.
pub fn log_cholesky_encode(cov: &DMatrix<f64>) -> Result<DVector<f64>, CoreError> {
    if !cov.is_square() {
        return Err(CoreError::Argument(format!(
            "covariance must be square, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
        CoreError::Config("only positive definite matrices have a log-Cholesky encoding".into())
    })?;
    let l = chol.l();
    let d = cov.nrows();
    let mut out = DVector::zeros(triangle_len(d));
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            out[idx] = if i == j { l[(i, j)].ln() } else { l[(i, j)] };
            idx += 1;
        }
    }
    Ok(out)
}

/// Rebuilds the positive definite matrix from its log-Cholesky coordinates.
pub fn log_cholesky_decode(coords: &DVector<f64>, d: usize) -> Result<DMatrix<f64>, CoreError> {
    if coords.len() != triangle_len(d) {
        return Err(CoreError::Argument(format!(
            "a {d}x{d} covariance takes {} coordinates, got {}",
            triangle_len(d),
            coords.len()
        )));
    }
    let mut l = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j { coords[idx].exp() } else { coords[idx] };
            idx += 1;
        }
    }
    Ok(&l * l.transpose())
}

/// Block sizes inside a flat parameter vector: dynamics parameters first,
/// then optional log-Cholesky blocks for the model and observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    dynamics: usize,
    sigma_dim: Option<usize>,
    gamma_dim: Option<usize>,
}

impl ParamLayout {
    pub fn new(dynamics: usize, sigma_dim: Option<usize>, gamma_dim: Option<usize>) -> Self {
        Self {
            dynamics,
            sigma_dim,
            gamma_dim,
        }
    }

    pub fn dynamics_len(&self) -> usize {
        self.dynamics
    }

    pub fn sigma_dim(&self) -> Option<usize> {
        self.sigma_dim
    }

    pub fn gamma_dim(&self) -> Option<usize> {
        self.gamma_dim
    }

    pub fn len(&self) -> usize {
        self.dynamics
            + self.sigma_dim.map_or(0, triangle_len)
            + self.gamma_dim.map_or(0, triangle_len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A parameter point: the flat coordinates plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    theta: DVector<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(theta: DVector<f64>, layout: ParamLayout) -> Result<Self, CoreError> {
        if theta.len() != layout.len() {
            return Err(CoreError::Argument(format!(
                "layout describes {} coordinates, vector has {}",
                layout.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Argument(
                "parameter coordinates must be finite".into(),
            ));
        }
        Ok(Self { theta, layout })
    }

    /// Assembles a parameter vector from its decoded blocks.
    pub fn from_parts(
        dynamics: &DVector<f64>,
        sigma: Option<&DMatrix<f64>>,
        gamma: Option<&DMatrix<f64>>,
    ) -> Result<Self, CoreError> {
        let layout = ParamLayout::new(
            dynamics.len(),
            sigma.map(|m| m.nrows()),
            gamma.map(|m| m.nrows()),
        );
        let mut theta = DVector::zeros(layout.len());
        theta.rows_mut(0, dynamics.len()).copy_from(dynamics);
        let mut offset = dynamics.len();
        if let Some(cov) = sigma {
            let coords = log_cholesky_encode(cov)?;
            theta.rows_mut(offset, coords.len()).copy_from(&coords);
            offset += coords.len();
        }
        if let Some(cov) = gamma {
            let coords = log_cholesky_encode(cov)?;
            theta.rows_mut(offset, coords.len()).copy_from(&coords);
        }
        Self::new(theta, layout)
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dynamics(&self) -> DVector<f64> {
        self.theta.rows(0, self.layout.dynamics).into_owned()
    }

    pub fn sigma(&self) -> Option<DMatrix<f64>> {
        let d = self.layout.sigma_dim?;
        let coords = self
            .theta
            .rows(self.layout.dynamics, triangle_len(d))
            .into_owned();
        Some(log_cholesky_decode(&coords, d).expect("layout guarantees the coordinate count"))
    }

    pub fn gamma(&self) -> Option<DMatrix<f64>> {
        let d = self.layout.gamma_dim?;
        let offset = self.layout.dynamics + self.layout.sigma_dim.map_or(0, triangle_len);
        let coords = self.theta.rows(offset, triangle_len(d)).into_owned();
        Some(log_cholesky_decode(&coords, d).expect("layout guarantees the coordinate count"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encoding_then_decoding_is_the_identity() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 0.9]);
        let coords = log_cholesky_encode(&cov).unwrap();
        let back = log_cholesky_decode(&coords, 3).unwrap();
        assert!((&back - &cov).amax() <= 1e-12);
    }

    #[test]
    fn only_positive_definite_matrices_encode() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            log_cholesky_encode(&indefinite).unwrap_err(),
            CoreError::Config(_)
        ));
    }

    #[test]
    fn blocks_round_trip_through_the_flat_vector() {
        let dynamics = DVector::from_row_slice(&[0.8, -0.3]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let gamma = DMatrix::from_element(1, 1, 0.25);
        let p = ParamVector::from_parts(&dynamics, Some(&sigma), Some(&gamma)).unwrap();
        assert_eq!(p.theta().len(), 2 + 3 + 1);
        assert_eq!(p.dynamics(), dynamics);
        assert!((p.sigma().unwrap() - sigma).amax() <= 1e-12);
        assert!((p.gamma().unwrap() - gamma).amax() <= 1e-12);
    }

    #[test]
    fn layout_and_vector_lengths_must_agree() {
        let layout = ParamLayout::new(1, Some(2), None);
        assert!(ParamVector::new(DVector::zeros(3), layout).is_err());
        assert!(ParamVector::new(DVector::zeros(4), layout).is_ok());
        assert!(ParamVector::new(
            DVector::from_row_slice(&[f64::NAN, 0.0, 0.0, 0.0]),
            layout
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_coordinate_vector_decodes_to_positive_definite(
            coords in prop::collection::vec(-3.0_f64..3.0, 6)
        ) {
            let decoded = log_cholesky_decode(&DVector::from_vec(coords), 3).unwrap();
            prop_assert!(Cholesky::new(decoded).is_some());
        }
    }
}
