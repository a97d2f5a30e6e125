//! EM covariance updates for the model and observation noise.
//!
//! With the dynamics and observation maps known, the M-step maximizer is a
//! residual second-moment matrix under the current smoothing distribution:
//! averaged over the window and, for the sampled variant, over trajectories.
//! For linear models the expectation is also available exactly from the
//! closed-form smoothing posterior.

use dakit_core::{CoreError, ObservationSeries, StateSpaceModel};
use nalgebra::{DMatrix, DVector};

use crate::sampling::{smoother_posterior, SmootherSampleSet};

const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetrizes and floors the spectrum so the result is always usable as a
/// covariance.
pub(crate) fn floor_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floored = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(EIGEN_FLOOR)));
    let recomposed = &eig.eigenvectors * floored * eig.eigenvectors.transpose();
    (&recomposed + recomposed.transpose()) * 0.5
}

fn check_window(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    horizon: usize,
    dim: usize,
) -> Result<(), CoreError> {
    if dim != model.dim_state() {
        return Err(CoreError::Argument(format!(
            "trajectories have dimension {dim}, model dimension is {}",
            model.dim_state()
        )));
    }
    if obs.dim() != model.dim_obs() {
        return Err(CoreError::Argument(format!(
            "observations have dimension {}, model observes {}",
            obs.dim(),
            model.dim_obs()
        )));
    }
    if horizon != obs.horizon() {
        return Err(CoreError::Argument(format!(
            "trajectories cover {horizon} steps, the window holds {} observations",
            obs.horizon()
        )));
    }
    Ok(())
}

/// Monte Carlo EM update of the observation and model noise covariances
/// from smoother samples.
///
/// Returns `(gamma, sigma)`: per-transition averages of the data-residual
/// and model-residual outer products, averaged again over the sample set,
/// then symmetrized with an eigenvalue floor.
pub fn em_update_covariances(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    samples: &SmootherSampleSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CoreError> {
    check_window(model, obs, samples.horizon(), samples.dim())?;
    let d = model.dim_state();
    let k = model.dim_obs();
    let horizon = obs.horizon();
    let mut gamma = DMatrix::<f64>::zeros(k, k);
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for t in samples.trajectories() {
        for j in 0..horizon {
            let ro = obs.obs(j + 1) - model.obs_map().apply(t.state(j + 1));
            gamma += &ro * ro.transpose();
            let rd = t.state(j + 1) - model.dynamics().apply(t.state(j));
            sigma += &rd * rd.transpose();
        }
    }
    let scale = 1.0 / (samples.len() * horizon) as f64;
    Ok((floor_spd(&(gamma * scale)), floor_spd(&(sigma * scale))))
}

/// The same EM update with the expectation taken in closed form under the
/// exact smoothing posterior of a linear model.
pub fn em_update_covariances_exact(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CoreError> {
    let posterior = smoother_posterior(model, obs)?;
    let a = model
        .dynamics()
        .linear_matrix()
        .expect("the posterior construction already required linear dynamics");
    let h = model
        .obs_matrix()
        .expect("the posterior construction already required a linear observation map");
    let d = model.dim_state();
    let horizon = obs.horizon();

    let mean = |i: usize| -> DVector<f64> { posterior.mean().rows(i * d, d).into_owned() };
    let block = |i: usize, j: usize| -> DMatrix<f64> {
        posterior.cov().view((i * d, j * d), (d, d)).into_owned()
    };

    let mut gamma = DMatrix::<f64>::zeros(model.dim_obs(), model.dim_obs());
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for j in 0..horizon {
        let ro = obs.obs(j + 1) - h * mean(j + 1);
        gamma += &ro * ro.transpose() + h * block(j + 1, j + 1) * h.transpose();
        let rd = mean(j + 1) - a * mean(j);
        sigma += &rd * rd.transpose() + block(j + 1, j + 1) - a * block(j, j + 1)
            - block(j + 1, j) * a.transpose()
            + a * block(j, j) * a.transpose();
    }
    let scale = 1.0 / horizon as f64;
    Ok((floor_spd(&(gamma * scale)), floor_spd(&(sigma * scale))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dakit_core::{Dynamics, Gaussian, ObsMap, Trajectory};

    #[test]
    fn a_single_trajectory_gives_the_empirical_residual_average() {
        let model = StateSpaceModel::new(
            Dynamics::Linear(DMatrix::from_element(1, 1, 0.5)),
            DMatrix::identity(1, 1),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let states = Trajectory::new(vec![
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 1.5),
            DVector::from_element(1, 0.25),
        ])
        .unwrap();
        let obs = ObservationSeries::new(vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.75),
        ])
        .unwrap();
        let samples = SmootherSampleSet::new(vec![states]).unwrap();
        let (gamma, sigma) = em_update_covariances(&model, &obs, &samples).unwrap();
        // Model residuals: 1.5 - 1.0 = 0.5 and 0.25 - 0.75 = -0.5.
        assert!((sigma[(0, 0)] - 0.25).abs() <= 1e-14);
        // Data residuals: 1.0 - 1.5 = -0.5 and 0.75 - 0.25 = 0.5.
        assert!((gamma[(0, 0)] - 0.25).abs() <= 1e-14);
    }

    #[test]
    fn identical_residuals_across_samples_change_nothing() {
        let model = StateSpaceModel::new(
            Dynamics::identity(1),
            DMatrix::identity(1, 1),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let t = Trajectory::new(vec![DVector::zeros(1), DVector::from_element(1, 0.3)]).unwrap();
        let obs = ObservationSeries::new(vec![DVector::from_element(1, 0.5)]).unwrap();
        let one = SmootherSampleSet::new(vec![t.clone()]).unwrap();
        let three = SmootherSampleSet::new(vec![t.clone(), t.clone(), t]).unwrap();
        let (g1, s1) = em_update_covariances(&model, &obs, &one).unwrap();
        let (g3, s3) = em_update_covariances(&model, &obs, &three).unwrap();
        assert!((g1 - g3).amax() <= 1e-15);
        assert!((s1 - s3).amax() <= 1e-15);
    }

    #[test]
    fn zero_residuals_hit_the_eigenvalue_floor() {
        let model = StateSpaceModel::new(
            Dynamics::identity(1),
            DMatrix::identity(1, 1),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let t = Trajectory::new(vec![DVector::from_element(1, 0.4); 3]).unwrap();
        let obs = ObservationSeries::new(vec![DVector::from_element(1, 0.4); 2]).unwrap();
        let samples = SmootherSampleSet::new(vec![t]).unwrap();
        let (gamma, sigma) = em_update_covariances(&model, &obs, &samples).unwrap();
        assert_eq!(gamma[(0, 0)], EIGEN_FLOOR);
        assert_eq!(sigma[(0, 0)], EIGEN_FLOOR);
    }

    #[test]
    fn window_mismatches_are_rejected() {
        let model = StateSpaceModel::new(
            Dynamics::identity(1),
            DMatrix::identity(1, 1),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::identity(1, 1),
            Gaussian::standard(1),
        )
        .unwrap();
        let t = Trajectory::new(vec![DVector::zeros(1); 4]).unwrap();
        let obs = ObservationSeries::new(vec![DVector::zeros(1); 2]).unwrap();
        let samples = SmootherSampleSet::new(vec![t]).unwrap();
        assert!(em_update_covariances(&model, &obs, &samples).is_err());
    }
}
