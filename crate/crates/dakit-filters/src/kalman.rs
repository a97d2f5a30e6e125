//! Exact second-moment recursions for linear maps, the frozen-gain update,
//! and the extended filter obtained by linearizing nonlinear maps.

use dakit_core::{psd_factor, CoreError, Gaussian, RngStream, StateSpaceModel};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Diagonal jitter applied once when an innovation covariance fails to
/// factor, relative to its mean diagonal entry.
const JITTER_REL: f64 = 1e-10;

pub(crate) fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
    s
}

/// Cholesky factorization of an innovation covariance, retried once with a
/// jitter of `1e-10 * trace / k` on the diagonal.
pub(crate) fn innovation_cholesky(s: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, CoreError> {
    if let Some(chol) = Cholesky::new(s.clone()) {
        return Ok(chol);
    }
    let k = s.nrows();
    let jitter = JITTER_REL * s.trace() / k as f64;
    let mut padded = s.clone();
    for i in 0..k {
        padded[(i, i)] += jitter;
    }
    Cholesky::new(padded).ok_or_else(|| {
        CoreError::Numeric("innovation covariance is not positive definite".into())
    })
}

fn require_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<(), CoreError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(CoreError::Argument(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// One step of a second-moment filter: the predicted and corrected
/// distributions together with the gain that linked them.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    analysis: Gaussian,
    forecast: Gaussian,
    gain: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(
        analysis: Gaussian,
        forecast: Gaussian,
        gain: DMatrix<f64>,
    ) -> Result<Self, CoreError> {
        if analysis.dim() != forecast.dim() {
            return Err(CoreError::Argument(format!(
                "analysis dimension {} does not match forecast dimension {}",
                analysis.dim(),
                forecast.dim()
            )));
        }
        if gain.nrows() != analysis.dim() {
            return Err(CoreError::Argument(format!(
                "gain has {} rows for state dimension {}",
                gain.nrows(),
                analysis.dim()
            )));
        }
        if gain.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric("gain contains non-finite entries".into()));
        }
        Ok(Self {
            analysis,
            forecast,
            gain,
        })
    }

    /// Seeds a filter recursion: before any data arrives the forecast equals
    /// the prior and the gain is zero.
    pub fn initial(prior: Gaussian, obs_dim: usize) -> Self {
        let d = prior.dim();
        Self {
            forecast: prior.clone(),
            analysis: prior,
            gain: DMatrix::zeros(d, obs_dim),
        }
    }

    pub fn analysis(&self) -> &Gaussian {
        &self.analysis
    }

    pub fn forecast(&self) -> &Gaussian {
        &self.forecast
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

fn correct(
    forecast_mean: DVector<f64>,
    forecast_cov: DMatrix<f64>,
    h: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    y: &DVector<f64>,
    innovation: DVector<f64>,
) -> Result<KalmanState, CoreError> {
    let d = forecast_mean.len();
    let k = y.len();
    require_shape(h, k, d, "observation matrix")?;
    require_shape(gamma, k, k, "observation noise covariance")?;

    let s = symmetrized(&(h * &forecast_cov * h.transpose() + gamma));
    let chol = innovation_cholesky(&s)?;
    // K = C_hat H' S^{-1}, computed through K' = S^{-1} H C_hat.
    let gain = chol.solve(&(h * &forecast_cov)).transpose();

    let mean = &forecast_mean + &gain * innovation;
    let cov = symmetrized(&(&forecast_cov - &gain * (h * &forecast_cov)));
    KalmanState::new(
        Gaussian::new(mean, cov)?,
        Gaussian::new(forecast_mean, forecast_cov)?,
        gain,
    )
}

/// One linear-Gaussian filter step.
///
/// Predicts with `(A, Sigma)`, then corrects with the gain
/// `K = C_hat H' (H C_hat H' + Gamma)^{-1}`: the analysis is
/// `N(v_hat + K(y - H v_hat), (I - KH) C_hat)`. The covariance recursion
/// never touches `y`.
pub fn kalman_step(
    state: &Gaussian,
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<KalmanState, CoreError> {
    let d = state.dim();
    require_shape(a, d, d, "dynamics matrix")?;
    require_shape(sigma, d, d, "model noise covariance")?;

    let forecast_mean = a * state.mean();
    let forecast_cov = symmetrized(&(a * state.cov() * a.transpose() + sigma));
    let innovation = y - h * &forecast_mean;
    correct(forecast_mean, forecast_cov, h, gamma, y, innovation)
}

/// Iterates the covariance recursion of [`kalman_step`] to its fixed point
/// and returns `(forecast covariance, gain, analysis covariance)` there.
///
/// The iteration starts from `Sigma` and stops when successive forecast
/// covariances agree to `tol * (1 + norm)` in the Frobenius norm. Systems
/// for which the recursion does not contract exhaust `max_iter` and report
/// the last residual.
pub fn steady_state_gain(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), CoreError> {
    let d = a.nrows();
    require_shape(a, d, d, "dynamics matrix")?;
    let k = h.nrows();
    require_shape(h, k, d, "observation matrix")?;
    require_shape(sigma, d, d, "model noise covariance")?;
    require_shape(gamma, k, k, "observation noise covariance")?;
    if !tol.is_finite() || tol <= 0.0 {
        return Err(CoreError::Argument(format!(
            "convergence tolerance must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(CoreError::Argument("iteration budget must be at least 1".into()));
    }

    let step = |c_hat: &DMatrix<f64>| -> Result<DMatrix<f64>, CoreError> {
        let s = symmetrized(&(h * c_hat * h.transpose() + gamma));
        let gain = innovation_cholesky(&s)?.solve(&(h * c_hat)).transpose();
        let analysis = symmetrized(&(c_hat - &gain * (h * c_hat)));
        Ok(symmetrized(&(a * analysis * a.transpose() + sigma)))
    };

    let mut c_hat = symmetrized(sigma);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = step(&c_hat)?;
        residual = (&next - &c_hat).norm();
        let converged = residual <= tol * (1.0 + c_hat.norm());
        c_hat = next;
        if converged {
            let s = symmetrized(&(h * &c_hat * h.transpose() + gamma));
            let gain = innovation_cholesky(&s)?.solve(&(h * &c_hat)).transpose();
            let analysis = symmetrized(&(&c_hat - &gain * (h * &c_hat)));
            return Ok((c_hat, gain, analysis));
        }
    }
    Err(CoreError::Numeric(format!(
        "covariance recursion did not converge in {max_iter} iterations, \
         last residual {residual:.3e}"
    )))
}

/// One fixed-gain step: predict with the model's dynamics (plus model noise
/// when `inject_noise` is set), then correct with the frozen gain:
/// `v_hat + K (y - h(v_hat))`.
pub fn threedvar_step(
    v: &DVector<f64>,
    model: &StateSpaceModel,
    gain: &DMatrix<f64>,
    y: &DVector<f64>,
    inject_noise: bool,
    rng: &RngStream,
) -> Result<DVector<f64>, CoreError> {
    let d = model.dim_state();
    let k = model.dim_obs();
    if v.len() != d {
        return Err(CoreError::Argument(format!(
            "state has length {}, model dimension is {d}",
            v.len()
        )));
    }
    if y.len() != k {
        return Err(CoreError::Argument(format!(
            "observation has length {}, model observes {k}",
            y.len()
        )));
    }
    require_shape(gain, d, k, "gain")?;
    if gain.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Argument("gain must be finite".into()));
    }

    let mut v_hat = model.dynamics().apply(v);
    if inject_noise {
        v_hat += psd_factor(model.model_noise())? * rng.normal_vector(d);
    }
    let innovation = y - model.obs_map().apply(&v_hat);
    Ok(v_hat + gain * innovation)
}

/// One linearized filter step.
///
/// The dynamics Jacobian is taken at the incoming analysis mean, the
/// observation Jacobian at the predicted mean; means propagate through the
/// nonlinear maps while covariances and the gain use the Jacobians. Optional
/// callbacks override the model's own Jacobians; without them, maps that
/// cannot differentiate themselves report the failure.
pub fn exkf_step(
    state: &KalmanState,
    model: &StateSpaceModel,
    y: &DVector<f64>,
    jac_dyn: Option<&dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
    jac_obs: Option<&dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
) -> Result<KalmanState, CoreError> {
    let d = model.dim_state();
    let k = model.dim_obs();
    if state.analysis().dim() != d {
        return Err(CoreError::Argument(format!(
            "state has dimension {}, model dimension is {d}",
            state.analysis().dim()
        )));
    }
    if y.len() != k {
        return Err(CoreError::Argument(format!(
            "observation has length {}, model observes {k}",
            y.len()
        )));
    }

    let v = state.analysis().mean();
    let a = match jac_dyn {
        Some(f) => f(v),
        None => model.dynamics().jacobian(v)?,
    };
    require_shape(&a, d, d, "dynamics Jacobian")?;

    let forecast_mean = model.dynamics().apply(v);
    let forecast_cov =
        symmetrized(&(&a * state.analysis().cov() * a.transpose() + model.model_noise()));

    let h = match jac_obs {
        Some(f) => f(&forecast_mean),
        None => model.obs_map().jacobian(&forecast_mean)?,
    };
    require_shape(&h, k, d, "observation Jacobian")?;

    let innovation = y - model.obs_map().apply(&forecast_mean);
    correct(forecast_mean, forecast_cov, &h, model.obs_noise(), y, innovation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dakit_core::{Dynamics, ObsMap};

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn conjugate_scalar_step_splits_the_difference() {
        // Identity dynamics without noise, unit noise on a direct
        // observation: posterior precision doubles and the mean moves
        // halfway to the data.
        let out = kalman_step(
            &Gaussian::standard(1),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(0.0),
            &scalar(1.0),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert!((out.analysis().mean()[0] - 1.0).abs() <= 1e-15);
        assert!((out.analysis().cov()[(0, 0)] - 0.5).abs() <= 1e-15);
        assert!((out.gain()[(0, 0)] - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn zero_prior_covariance_ignores_the_data() {
        let prior = Gaussian::dirac(DVector::from_element(1, 0.7));
        let out = kalman_step(
            &prior,
            &scalar(0.9),
            &scalar(1.0),
            &scalar(0.0),
            &scalar(1.0),
            &DVector::from_element(1, 100.0),
        )
        .unwrap();
        assert_eq!(out.gain()[(0, 0)], 0.0);
        assert_eq!(out.analysis(), out.forecast());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let prior = Gaussian::standard(2);
        let y = DVector::zeros(1);
        let bad = kalman_step(
            &prior,
            &DMatrix::identity(3, 3),
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(1, 1),
            &y,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn steady_state_matches_the_scalar_quadratic() {
        // Fixed point of c -> a^2 c/(c+1) + 1 at a = 0.5 solves
        // c^2 - 0.25 c - 1 = 0.
        let (c_hat, gain, analysis) = steady_state_gain(
            &scalar(0.5),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(1.0),
            1e-14,
            1000,
        )
        .unwrap();
        let root = (0.25 + 4.0625f64.sqrt()) / 2.0;
        assert!((c_hat[(0, 0)] - root).abs() <= 1e-10);
        assert!((gain[(0, 0)] - root / (root + 1.0)).abs() <= 1e-10);
        assert!((analysis[(0, 0)] - root / (root + 1.0)).abs() <= 1e-10);
    }

    #[test]
    fn noise_free_stable_system_decays_to_zero_gain() {
        let (c_hat, gain, analysis) =
            steady_state_gain(&scalar(0.8), &scalar(1.0), &scalar(0.0), &scalar(1.0), 1e-12, 500)
                .unwrap();
        assert!(c_hat[(0, 0)].abs() <= 1e-10);
        assert!(gain[(0, 0)].abs() <= 1e-10);
        assert!(analysis[(0, 0)].abs() <= 1e-10);
    }

    #[test]
    fn exhausted_iteration_budget_reports_the_residual() {
        let err = steady_state_gain(
            &scalar(0.99),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(1.0),
            1e-15,
            2,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("residual"), "unexpected message: {msg}");
    }

    fn identity_model(d: usize) -> StateSpaceModel {
        StateSpaceModel::new(
            Dynamics::identity(d),
            DMatrix::zeros(d, d),
            ObsMap::Linear(DMatrix::identity(d, d)),
            DMatrix::identity(d, d),
            Gaussian::standard(d),
        )
        .unwrap()
    }

    #[test]
    fn full_gain_fixed_point_step_returns_the_data() {
        let model = identity_model(2);
        let v = DVector::from_vec(vec![0.3, -0.9]);
        let y = DVector::from_vec(vec![5.0, 7.0]);
        let out = threedvar_step(
            &v,
            &model,
            &DMatrix::identity(2, 2),
            &y,
            false,
            &RngStream::new(0),
        )
        .unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn zero_gain_step_is_the_pure_forecast() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.8]);
        let model = StateSpaceModel::new(
            Dynamics::Linear(a.clone()),
            DMatrix::zeros(2, 2),
            ObsMap::Linear(DMatrix::identity(2, 2)),
            DMatrix::identity(2, 2),
            Gaussian::standard(2),
        )
        .unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let out = threedvar_step(
            &v,
            &model,
            &DMatrix::zeros(2, 2),
            &DVector::zeros(2),
            false,
            &RngStream::new(0),
        )
        .unwrap();
        assert_eq!(out, &a * &v);
    }

    #[test]
    fn linear_model_reduces_the_extended_step_to_the_exact_one() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]);
        let gamma = scalar(0.5);
        let prior = Gaussian::new(
            DVector::from_vec(vec![0.2, -0.4]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        let y = DVector::from_element(1, 1.7);

        let model = StateSpaceModel::new(
            Dynamics::Linear(a.clone()),
            sigma.clone(),
            ObsMap::Linear(h.clone()),
            gamma.clone(),
            prior.clone(),
        )
        .unwrap();
        let exact = kalman_step(&prior, &a, &h, &sigma, &gamma, &y).unwrap();
        let extended = exkf_step(&KalmanState::initial(prior, 1), &model, &y, None, None).unwrap();

        let mean_gap = (exact.analysis().mean() - extended.analysis().mean()).amax();
        let cov_gap = (exact.analysis().cov() - extended.analysis().cov()).amax();
        let gain_gap = (exact.gain() - extended.gain()).amax();
        assert!(mean_gap <= 1e-12 && cov_gap <= 1e-12 && gain_gap <= 1e-12);
    }

    #[test]
    fn missing_jacobians_are_reported() {
        let model = StateSpaceModel::new(
            Dynamics::custom(|v| v.map(|x| x * x)),
            DMatrix::identity(1, 1),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let state = KalmanState::initial(Gaussian::standard(1), 1);
        let err = exkf_step(&state, &model, &DVector::zeros(1), None, None).unwrap_err();
        assert!(matches!(err, CoreError::Unavailable(_)));

        let jac = |v: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 * v[0]);
        assert!(exkf_step(&state, &model, &DVector::zeros(1), Some(&jac), None).is_ok());
    }
}
