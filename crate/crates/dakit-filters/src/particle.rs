//! Sequential importance sampling with resampling, in the bootstrap form
//! and with the Gaussian proposal that conditions each move on the data.

use crate::kalman::{innovation_cholesky, symmetrized};
use dakit_core::{
    psd_factor, CoreError, Ensemble, RngStream, StateSpaceModel, WeightedEnsemble,
};
use nalgebra::{Cholesky, DMatrix, DVector};

/// How [`resample`] draws the equally weighted replacement ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleScheme {
    /// `N` independent draws from the weight distribution.
    Multinomial,
    /// One uniform offset, then a stratified sweep through the cumulative
    /// weights; equal weights reproduce the ensemble exactly.
    Systematic,
}

/// Draws `N` equally weighted members; member `n` is copied `N w_n` times
/// in expectation.
pub fn resample(
    w: &WeightedEnsemble,
    scheme: ResampleScheme,
    rng: &RngStream,
) -> Result<Ensemble, CoreError> {
    let n = w.len();
    let weights = w.weights();
    if weights.iter().all(|&x| x == 0.0) {
        return Err(CoreError::Numeric("all resampling weights are zero".into()));
    }
    let mut out = Vec::with_capacity(n);
    match scheme {
        ResampleScheme::Systematic => {
            let u = rng.uniform();
            let mut cum = weights[0];
            let mut i = 0;
            for t in 0..n {
                let p = (u + t as f64) / n as f64;
                while p >= cum && i + 1 < n {
                    i += 1;
                    cum += weights[i];
                }
                out.push(w.member(i).clone());
            }
        }
        ResampleScheme::Multinomial => {
            let mut cum = Vec::with_capacity(n);
            let mut acc = 0.0;
            for &wi in weights.iter() {
                acc += wi;
                cum.push(acc);
            }
            for u in rng.uniforms(n) {
                let i = cum.partition_point(|&c| c <= u).min(n - 1);
                out.push(w.member(i).clone());
            }
        }
    }
    Ensemble::new(out)
}

fn check_step_inputs(
    w: &WeightedEnsemble,
    model: &StateSpaceModel,
    y: &DVector<f64>,
    threshold: f64,
) -> Result<(), CoreError> {
    if w.dim() != model.dim_state() {
        return Err(CoreError::Argument(format!(
            "particle dimension {} does not match model dimension {}",
            w.dim(),
            model.dim_state()
        )));
    }
    if y.len() != model.dim_obs() {
        return Err(CoreError::Argument(format!(
            "observation has length {}, model observes {}",
            y.len(),
            model.dim_obs()
        )));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(CoreError::Argument(format!(
            "resampling threshold must be a nonnegative fraction of N, got {threshold}"
        )));
    }
    Ok(())
}

/// Resamples when the effective sample size drops below `threshold * N`.
/// Returns the working particles and their log-weights.
fn maybe_resample(
    w: &WeightedEnsemble,
    threshold: f64,
    rng: &RngStream,
) -> Result<(Vec<DVector<f64>>, Vec<f64>), CoreError> {
    let n = w.len();
    if w.effective_sample_size() < threshold * n as f64 {
        let e = resample(w, ResampleScheme::Systematic, &rng.child("resample"))?;
        Ok((e.into_members(), vec![-(n as f64).ln(); n]))
    } else {
        let log_w = w.weights().iter().map(|&x| x.ln()).collect();
        Ok((w.ensemble().members().to_vec(), log_w))
    }
}

/// Log-sum-exp normalization; a non-finite maximum means every particle
/// carries zero weight.
fn normalize_log_weights(log_w: Vec<f64>) -> Result<DVector<f64>, CoreError> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(CoreError::Numeric(
            "importance weights degenerated to zero; the observation is \
             irreconcilable with every particle"
                .into(),
        ));
    }
    let unnorm: Vec<f64> = log_w.iter().map(|lw| (lw - m).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(DVector::from_vec(
        unnorm.into_iter().map(|x| x / total).collect(),
    ))
}

/// One bootstrap step: optional resampling, a move through the model
/// dynamics with fresh noise, and reweighting by the observation density
/// `exp(-1/2 |y - h(v)|^2_Gamma)` in log space.
pub fn bpf_step(
    w: &WeightedEnsemble,
    model: &StateSpaceModel,
    y: &DVector<f64>,
    rng: &RngStream,
    resample_threshold: f64,
) -> Result<WeightedEnsemble, CoreError> {
    check_step_inputs(w, model, y, resample_threshold)?;
    let d = model.dim_state();
    let gamma_chol = model.gamma_cholesky()?;
    let noise_factor = psd_factor(model.model_noise())?;

    let (particles, mut log_w) = maybe_resample(w, resample_threshold, rng)?;
    let dyn_stream = rng.child("dynamics");
    let mut moved = Vec::with_capacity(particles.len());
    for (i, p) in particles.iter().enumerate() {
        let v_hat =
            model.dynamics().apply(p) + &noise_factor * dyn_stream.index(i as u64).normal_vector(d);
        let innovation = y - model.obs_map().apply(&v_hat);
        log_w[i] -= 0.5 * gamma_chol.solve(&innovation).dot(&innovation);
        moved.push(v_hat);
    }
    WeightedEnsemble::new(Ensemble::new(moved)?, normalize_log_weights(log_w)?)
}

/// Proposal pieces for [`opf_step`]: innovation covariance `S = H Sigma H' +
/// Gamma`, gain `K = Sigma H' S^{-1}`, and move covariance `(I - KH) Sigma`.
fn proposal_triple(
    sigma: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), CoreError> {
    if Cholesky::new(sigma.clone()).is_none() {
        return Err(CoreError::Config(
            "model noise covariance must be positive definite for the optimal \
             proposal"
                .into(),
        ));
    }
    let s = symmetrized(&(h * sigma * h.transpose() + gamma));
    let gain = innovation_cholesky(&s)?.solve(&(h * sigma)).transpose();
    let c = symmetrized(&(sigma - &gain * (h * sigma)));
    Ok((s, gain, c))
}

/// One step with the proposal that is optimal for a linear observation map:
/// each particle moves to `Psi(v) + K(y - H Psi(v))` plus noise with
/// covariance `(I - KH) Sigma`, and is weighted by the pre-move predictive
/// density `exp(-1/2 |y - H Psi(v)|^2_S)`.
pub fn opf_step(
    w: &WeightedEnsemble,
    model: &StateSpaceModel,
    y: &DVector<f64>,
    rng: &RngStream,
    resample_threshold: f64,
) -> Result<WeightedEnsemble, CoreError> {
    check_step_inputs(w, model, y, resample_threshold)?;
    let d = model.dim_state();
    let h = model.obs_matrix().ok_or_else(|| {
        CoreError::Config("the optimal proposal needs a linear observation map".into())
    })?;
    let (s, gain, c) = proposal_triple(model.model_noise(), h, model.obs_noise())?;
    let s_chol = innovation_cholesky(&s)?;
    let move_factor = psd_factor(&c)?;

    let (particles, mut log_w) = maybe_resample(w, resample_threshold, rng)?;
    let prop_stream = rng.child("proposal");
    let mut moved = Vec::with_capacity(particles.len());
    for (i, p) in particles.iter().enumerate() {
        let predicted = model.dynamics().apply(p);
        let innovation = y - h * &predicted;
        log_w[i] -= 0.5 * s_chol.solve(&innovation).dot(&innovation);
        let z = prop_stream.index(i as u64).normal_vector(d);
        moved.push(&predicted + &gain * &innovation + &move_factor * z);
    }
    WeightedEnsemble::new(Ensemble::new(moved)?, normalize_log_weights(log_w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dakit_core::{ensemble_moments, Dynamics, Gaussian, ObsMap};

    fn scalar_members(values: &[f64]) -> Ensemble {
        Ensemble::new(values.iter().map(|&v| DVector::from_element(1, v)).collect()).unwrap()
    }

    #[test]
    fn systematic_resampling_fixes_a_uniform_ensemble() {
        let e = scalar_members(&[4.0, -2.0, 0.5, 9.0, 1.25, -3.0, 7.0, 0.0]);
        let out = resample(
            &WeightedEnsemble::uniform(e.clone()),
            ResampleScheme::Systematic,
            &RngStream::new(11),
        )
        .unwrap();
        assert_eq!(out.members(), e.members());
    }

    #[test]
    fn a_point_mass_weight_copies_one_member() {
        let e = scalar_members(&[4.0, -2.0, 0.5]);
        let w = WeightedEnsemble::new(e, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        for scheme in [ResampleScheme::Systematic, ResampleScheme::Multinomial] {
            let out = resample(&w, scheme, &RngStream::new(3)).unwrap();
            assert!(out.iter().all(|m| m[0] == 4.0));
        }
    }

    #[test]
    fn proposal_pieces_match_the_scalar_arithmetic() {
        let one = DMatrix::identity(1, 1);
        let (s, k, c) = proposal_triple(&one, &one, &one).unwrap();
        assert_eq!(s[(0, 0)], 2.0);
        assert!((k[(0, 0)] - 0.5).abs() <= 1e-15);
        assert!((c[(0, 0)] - 0.5).abs() <= 1e-15);
    }

    fn scalar_model(a: f64, sigma: f64, gamma: f64) -> StateSpaceModel {
        StateSpaceModel::with_degenerate_noise(
            Dynamics::Linear(DMatrix::from_element(1, 1, a)),
            DMatrix::from_element(1, 1, sigma),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::from_element(1, 1, gamma),
            Gaussian::standard(1),
        )
        .unwrap()
    }

    #[test]
    fn indistinguishable_particles_share_the_weight() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let e = scalar_members(&[0.7, 0.7, 0.7, 0.7]);
        let out = bpf_step(
            &WeightedEnsemble::uniform(e),
            &model,
            &DVector::from_element(1, 0.3),
            &RngStream::new(5),
            0.5,
        )
        .unwrap();
        for &w in out.weights().iter() {
            assert!((w - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn uninformative_data_keeps_the_weights_uniform() {
        let model = scalar_model(1.0, 0.0, 1e12);
        let e = scalar_members(&[-4.0, 0.0, 2.0, 11.0]);
        let out = bpf_step(
            &WeightedEnsemble::uniform(e),
            &model,
            &DVector::from_element(1, 1.0),
            &RngStream::new(5),
            0.5,
        )
        .unwrap();
        for &w in out.weights().iter() {
            assert!((w - 0.25).abs() <= 1e-10);
        }
    }

    #[test]
    fn the_threshold_gates_the_weight_reset() {
        let model = scalar_model(1.0, 0.0, 1e12);
        let e = scalar_members(&[1.0, 2.0, 3.0]);
        let skewed = DVector::from_vec(vec![0.90, 0.06, 0.04]);
        let w = WeightedEnsemble::new(e, skewed.clone()).unwrap();
        let y = DVector::from_element(1, 0.0);

        // ESS is about 1.23: a threshold of 1 forces the reset, a threshold
        // of 0 forbids it. Data this flat cannot change the weights.
        let reset = bpf_step(&w, &model, &y, &RngStream::new(9), 1.0).unwrap();
        for &wi in reset.weights().iter() {
            assert!((wi - 1.0 / 3.0).abs() <= 1e-10);
        }
        let kept = bpf_step(&w, &model, &y, &RngStream::new(9), 0.0).unwrap();
        assert!((kept.weights() - skewed).amax() <= 1e-10);
    }

    #[test]
    fn hopeless_observations_are_reported_as_degenerate() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let e = scalar_members(&[1e200, 2e200]);
        let err = bpf_step(
            &WeightedEnsemble::uniform(e),
            &model,
            &DVector::from_element(1, 0.0),
            &RngStream::new(2),
            0.5,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)));
    }

    #[test]
    fn optimal_proposal_requires_a_linear_map_and_full_rank_noise() {
        let nonlinear = StateSpaceModel::new(
            Dynamics::identity(1),
            DMatrix::identity(1, 1),
            ObsMap::custom(|v| v.map(|x| x * x)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let e = scalar_members(&[0.1, 0.9]);
        let w = WeightedEnsemble::uniform(e);
        let y = DVector::from_element(1, 0.5);
        let rng = RngStream::new(1);
        assert!(matches!(
            opf_step(&w, &nonlinear, &y, &rng, 0.5).unwrap_err(),
            CoreError::Config(_)
        ));

        let degenerate = scalar_model(1.0, 0.0, 1.0);
        assert!(matches!(
            opf_step(&w, &degenerate, &y, &rng, 0.5).unwrap_err(),
            CoreError::Config(_)
        ));
    }

    #[test]
    fn optimal_moves_concentrate_between_forecast_and_data() {
        // With Sigma = Gamma = 1 the move mean is (Psi(v) + y) / 2 and the
        // move variance is 1/2, half the bootstrap spread.
        let model = scalar_model(0.9, 1.0, 1.0);
        let e = scalar_members(&[2.0; 512]);
        let y = DVector::from_element(1, 4.0);
        let out = opf_step(
            &WeightedEnsemble::uniform(e),
            &model,
            &y,
            &RngStream::new(17),
            0.5,
        )
        .unwrap();
        let (mean, cov) = ensemble_moments(out.ensemble());
        assert!((mean[0] - 0.5 * (0.9 * 2.0 + 4.0)).abs() <= 4.0 * (0.5f64 / 512.0).sqrt());
        assert!((cov[(0, 0)] - 0.5).abs() <= 0.15);
    }
}
