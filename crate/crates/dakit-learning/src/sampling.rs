//! Exact trajectory sampling from the smoothing distribution of a linear
//! model.
//!
//! The states and observations of a linear-Gaussian model are jointly
//! Gaussian, so the conditional of the stacked states given the stacked data
//! is available in closed form at desk scale. Samples drawn from it are
//! exact smoother samples, suitable as an E-step.

use dakit_core::{
    gaussian_sample, CoreError, Gaussian, ObservationSeries, RngStream, StateSpaceModel,
    Trajectory,
};
use nalgebra::{DMatrix, DVector};

/// Largest stacked state dimension `d * (J + 1)` accepted by the exact
/// conditioning path.
pub const MAX_STACKED_DIM: usize = 2000;

/// Trajectories drawn from one smoothing distribution.
#[derive(Debug, Clone)]
pub struct SmootherSampleSet {
    trajectories: Vec<Trajectory>,
}

impl SmootherSampleSet {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self, CoreError> {
        let first = trajectories
            .first()
            .ok_or_else(|| CoreError::Argument("a sample set needs at least one trajectory".into()))?;
        let (horizon, dim) = (first.horizon(), first.dim());
        if trajectories
            .iter()
            .any(|t| t.horizon() != horizon || t.dim() != dim)
        {
            return Err(CoreError::Argument(
                "all sampled trajectories must share length and dimension".into(),
            ));
        }
        Ok(Self { trajectories })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn trajectory(&self, n: usize) -> &Trajectory {
        &self.trajectories[n]
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
}

fn require_linear(model: &StateSpaceModel) -> Result<(&DMatrix<f64>, &DMatrix<f64>), CoreError> {
    let a = model.dynamics().linear_matrix().ok_or_else(|| {
        CoreError::Config("exact smoother sampling requires linear dynamics".into())
    })?;
    let h = model.obs_matrix().ok_or_else(|| {
        CoreError::Config("exact smoother sampling requires a linear observation map".into())
    })?;
    Ok((a, h))
}

/// The Gaussian over the stacked states `(v_0, ..., v_J)` conditioned on the
/// observations, for a linear model.
///
/// The stacked dimension `d * (J + 1)` is capped at [`MAX_STACKED_DIM`].
pub fn smoother_posterior(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
) -> Result<Gaussian, CoreError> {
    let (a, h) = require_linear(model)?;
    if obs.dim() != model.dim_obs() {
        return Err(CoreError::Argument(format!(
            "observations have dimension {}, model observes {}",
            obs.dim(),
            model.dim_obs()
        )));
    }
    let d = model.dim_state();
    let k = model.dim_obs();
    let horizon = obs.horizon();
    let stacked = d * (horizon + 1);
    if stacked > MAX_STACKED_DIM {
        return Err(CoreError::Argument(format!(
            "stacked state dimension {stacked} exceeds the exact-conditioning cap {MAX_STACKED_DIM}"
        )));
    }

    // Prior moments of the stacked states, one covariance block at a time:
    // cov[i][j] = Cov(v_i, v_j).
    let mut cov = vec![vec![DMatrix::<f64>::zeros(d, d); horizon + 1]; horizon + 1];
    cov[0][0] = model.init().cov().clone();
    for j in 0..horizon {
        for i in 0..=j {
            cov[j + 1][i] = a * &cov[j][i];
            cov[i][j + 1] = cov[j + 1][i].transpose();
        }
        cov[j + 1][j + 1] = a * &cov[j][j] * a.transpose() + model.model_noise();
    }
    let mut mean = vec![model.init().mean().clone()];
    for j in 0..horizon {
        mean.push(a * &mean[j]);
    }

    let mut syy = DMatrix::<f64>::zeros(horizon * k, horizon * k);
    let mut svy = DMatrix::<f64>::zeros(stacked, horizon * k);
    let mut innovation = DVector::<f64>::zeros(horizon * k);
    for col in 0..horizon {
        for row in 0..horizon {
            let mut block = h * &cov[row + 1][col + 1] * h.transpose();
            if row == col {
                block += model.obs_noise();
            }
            syy.view_mut((row * k, col * k), (k, k)).copy_from(&block);
        }
        for row in 0..=horizon {
            svy.view_mut((row * d, col * k), (d, k))
                .copy_from(&(&cov[row][col + 1] * h.transpose()));
        }
        innovation
            .rows_mut(col * k, k)
            .copy_from(&(obs.obs(col + 1) - h * &mean[col + 1]));
    }

    let chol = syy.clone().cholesky().ok_or_else(|| {
        CoreError::Numeric("the stacked data covariance is not positive definite".into())
    })?;
    let gain = chol.solve(&svy.transpose()).transpose();

    let mut prior_mean = DVector::<f64>::zeros(stacked);
    let mut prior_cov = DMatrix::<f64>::zeros(stacked, stacked);
    for i in 0..=horizon {
        prior_mean.rows_mut(i * d, d).copy_from(&mean[i]);
        for j in 0..=horizon {
            prior_cov
                .view_mut((i * d, j * d), (d, d))
                .copy_from(&cov[i][j]);
        }
    }
    let post_mean = prior_mean + &gain * innovation;
    let post_cov = &prior_cov - gain * svy.transpose();
    let symmetric = (&post_cov + post_cov.transpose()) * 0.5;
    Gaussian::new(post_mean, symmetric)
}

/// Draws `m` exact trajectories from the smoothing distribution of a linear
/// model.
pub fn exact_smoother_samples(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    m: usize,
    rng: &RngStream,
) -> Result<SmootherSampleSet, CoreError> {
    if m == 0 {
        return Err(CoreError::Argument("at least one sample is required".into()));
    }
    let posterior = smoother_posterior(model, obs)?;
    let draws = gaussian_sample(&posterior, m, rng)?;
    let d = model.dim_state();
    let states_per = obs.horizon() + 1;
    let trajectories = draws
        .members()
        .iter()
        .map(|flat| {
            let states = (0..states_per)
                .map(|i| flat.rows(i * d, d).into_owned())
                .collect();
            Trajectory::new(states)
        })
        .collect::<Result<Vec<_>, _>>()?;
    SmootherSampleSet::new(trajectories)
}
