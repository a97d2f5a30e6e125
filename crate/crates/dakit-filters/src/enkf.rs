//! Perturbed-observation ensemble update with multiplicative inflation and
//! distance-based covariance tapering.

use crate::kalman::{innovation_cholesky, symmetrized};
use dakit_core::{ensemble_moments, psd_factor, CoreError, Ensemble, RngStream, StateSpaceModel};
use nalgebra::{DMatrix, DVector};

fn check_distance_entries(m: &DMatrix<f64>, what: &str) -> Result<(), CoreError> {
    if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CoreError::Argument(format!(
            "{what} must have finite nonnegative entries"
        )));
    }
    Ok(())
}

fn check_distance_matrix(m: &DMatrix<f64>, what: &str) -> Result<(), CoreError> {
    if m.nrows() != m.ncols() {
        return Err(CoreError::Argument(format!(
            "{what} is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    check_distance_entries(m, what)?;
    for i in 0..m.nrows() {
        if m[(i, i)] != 0.0 {
            return Err(CoreError::Argument(format!("{what} must have a zero diagonal")));
        }
        for j in (i + 1)..m.ncols() {
            if m[(i, j)] != m[(j, i)] {
                return Err(CoreError::Argument(format!("{what} must be symmetric")));
            }
        }
    }
    Ok(())
}

/// Distances needed to taper the cross- and observed-space covariances when
/// the observation map has no matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsDistances {
    state_to_obs: DMatrix<f64>,
    obs_to_obs: DMatrix<f64>,
}

impl ObsDistances {
    pub fn new(state_to_obs: DMatrix<f64>, obs_to_obs: DMatrix<f64>) -> Result<Self, CoreError> {
        check_distance_entries(&state_to_obs, "state-to-observation distance matrix")?;
        check_distance_matrix(&obs_to_obs, "observation distance matrix")?;
        if state_to_obs.ncols() != obs_to_obs.nrows() {
            return Err(CoreError::Argument(format!(
                "state-to-observation distances cover {} observations, \
                 observation distances cover {}",
                state_to_obs.ncols(),
                obs_to_obs.nrows()
            )));
        }
        Ok(Self {
            state_to_obs,
            obs_to_obs,
        })
    }

    pub fn state_to_obs(&self) -> &DMatrix<f64> {
        &self.state_to_obs
    }

    pub fn obs_to_obs(&self) -> &DMatrix<f64> {
        &self.obs_to_obs
    }
}

/// Covariance taper: pairwise state distances and a length scale.
///
/// With a linear observation map the taper acts on the state covariance
/// alone. Otherwise the cross- and observed-space covariances are tapered
/// instead, which requires [`ObsDistances`].
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    state_distances: DMatrix<f64>,
    length: f64,
    obs_distances: Option<ObsDistances>,
}

impl Localization {
    pub fn new(state_distances: DMatrix<f64>, length: f64) -> Result<Self, CoreError> {
        check_distance_matrix(&state_distances, "state distance matrix")?;
        if !length.is_finite() || length <= 0.0 {
            return Err(CoreError::Argument(format!(
                "localization length must be positive, got {length}"
            )));
        }
        Ok(Self {
            state_distances,
            length,
            obs_distances: None,
        })
    }

    pub fn with_obs_distances(mut self, distances: ObsDistances) -> Result<Self, CoreError> {
        if distances.state_to_obs.nrows() != self.state_distances.nrows() {
            return Err(CoreError::Argument(format!(
                "state-to-observation distances cover {} state components, \
                 state distances cover {}",
                distances.state_to_obs.nrows(),
                self.state_distances.nrows()
            )));
        }
        self.obs_distances = Some(distances);
        Ok(self)
    }

    pub fn state_distances(&self) -> &DMatrix<f64> {
        &self.state_distances
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn obs_distances(&self) -> Option<&ObsDistances> {
        self.obs_distances.as_ref()
    }
}

/// Settings for [`enkf_step`]: inflation factor, optional taper, and the
/// stream that seeds forecast and observation perturbations.
#[derive(Debug, Clone)]
pub struct EnKFConfig {
    inflation: f64,
    localization: Option<Localization>,
    rng: RngStream,
}

impl EnKFConfig {
    pub fn new(rng: RngStream) -> Self {
        Self {
            inflation: 1.0,
            localization: None,
            rng,
        }
    }

    pub fn with_inflation(mut self, alpha: f64) -> Result<Self, CoreError> {
        if !alpha.is_finite() || alpha < 1.0 {
            return Err(CoreError::Argument(format!(
                "inflation factor must be at least 1, got {alpha}"
            )));
        }
        self.inflation = alpha;
        Ok(self)
    }

    pub fn with_localization(mut self, localization: Localization) -> Self {
        self.localization = Some(localization);
        self
    }

    pub fn inflation(&self) -> f64 {
        self.inflation
    }

    pub fn localization(&self) -> Option<&Localization> {
        self.localization.as_ref()
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }
}

/// Pulls every member away from the mean by `alpha`, scaling the ensemble
/// covariance by `alpha^2` and leaving the mean fixed.
pub fn inflate(e: &Ensemble, alpha: f64) -> Result<Ensemble, CoreError> {
    if !alpha.is_finite() || alpha < 1.0 {
        return Err(CoreError::Argument(format!(
            "inflation factor must be at least 1, got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok(e.clone());
    }
    let (mean, _) = ensemble_moments(e);
    let members = e.iter().map(|m| &mean + alpha * (m - &mean)).collect();
    Ensemble::new(members)
}

/// Elementwise taper `C_ik * exp(-D_ik^2 / ell)`.
pub fn localize_cov(
    c: &DMatrix<f64>,
    distances: &DMatrix<f64>,
    ell: f64,
) -> Result<DMatrix<f64>, CoreError> {
    if c.shape() != distances.shape() {
        return Err(CoreError::Argument(format!(
            "covariance is {}x{}, distance matrix is {}x{}",
            c.nrows(),
            c.ncols(),
            distances.nrows(),
            distances.ncols()
        )));
    }
    if !ell.is_finite() || ell <= 0.0 {
        return Err(CoreError::Argument(format!(
            "localization length must be positive, got {ell}"
        )));
    }
    Ok(DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
        c[(i, j)] * (-distances[(i, j)].powi(2) / ell).exp()
    }))
}

fn anomalies(members: &[DVector<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = members.len();
    let mut mean = DVector::zeros(dim);
    for m in members {
        mean += m;
    }
    mean /= n as f64;
    let a = DMatrix::from_fn(dim, n, |r, c| members[c][r] - mean[r]);
    (mean, a)
}

/// One perturbed-observation ensemble step.
///
/// Members are propagated through the dynamics with fresh model noise,
/// inflated, and updated with the gain `K = C_vh (C_hh + Gamma)^{-1}` built
/// from `1/N` empirical covariances of the inflated forecast. Each member
/// sees its own perturbed data `y - eta_n`. Member `n` draws from the
/// substreams `dynamics/n` and `obs-noise/n` of the configured stream, so a
/// fixed seed reproduces the step bit for bit.
pub fn enkf_step(
    e: &Ensemble,
    model: &StateSpaceModel,
    y: &DVector<f64>,
    cfg: &EnKFConfig,
) -> Result<Ensemble, CoreError> {
    let d = model.dim_state();
    let k = model.dim_obs();
    let n = e.len();
    if e.dim() != d {
        return Err(CoreError::Argument(format!(
            "ensemble dimension {} does not match model dimension {d}",
            e.dim()
        )));
    }
    if y.len() != k {
        return Err(CoreError::Argument(format!(
            "observation has length {}, model observes {k}",
            y.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::Argument(
            "ensemble update needs at least two members".into(),
        ));
    }

    let noise_factor = psd_factor(model.model_noise())?;
    let dyn_stream = cfg.rng().child("dynamics");
    let mut forecast = Vec::with_capacity(n);
    for (i, m) in e.iter().enumerate() {
        let xi = &noise_factor * dyn_stream.index(i as u64).normal_vector(d);
        forecast.push(model.dynamics().apply(m) + xi);
    }
    let forecast = inflate(&Ensemble::new(forecast)?, cfg.inflation())?;

    let observed: Vec<DVector<f64>> =
        forecast.iter().map(|m| model.obs_map().apply(m)).collect();
    let (_, a_v) = anomalies(forecast.members(), d);
    let (_, a_h) = anomalies(&observed, k);

    let gain = match (cfg.localization(), model.obs_matrix()) {
        (None, _) => {
            let c_vh = &a_v * a_h.transpose() / n as f64;
            let c_hh = symmetrized(&(&a_h * a_h.transpose() / n as f64));
            let s = symmetrized(&(c_hh + model.obs_noise()));
            innovation_cholesky(&s)?.solve(&c_vh.transpose()).transpose()
        }
        (Some(loc), Some(h)) => {
            let c_vv = symmetrized(&(&a_v * a_v.transpose() / n as f64));
            let c_loc = localize_cov(&c_vv, loc.state_distances(), loc.length())?;
            let s = symmetrized(&(h * &c_loc * h.transpose() + model.obs_noise()));
            innovation_cholesky(&s)?.solve(&(h * &c_loc)).transpose()
        }
        (Some(loc), None) => {
            let od = loc.obs_distances().ok_or_else(|| {
                CoreError::Config(
                    "tapering with a nonlinear observation map needs observation \
                     distances"
                        .into(),
                )
            })?;
            if od.state_to_obs().nrows() != d || od.obs_to_obs().nrows() != k {
                return Err(CoreError::Argument(format!(
                    "observation distances are sized {}x{} and {}x{}, model needs \
                     {d}x{k} and {k}x{k}",
                    od.state_to_obs().nrows(),
                    od.state_to_obs().ncols(),
                    od.obs_to_obs().nrows(),
                    od.obs_to_obs().ncols()
                )));
            }
            let c_vh = localize_cov(
                &(&a_v * a_h.transpose() / n as f64),
                od.state_to_obs(),
                loc.length(),
            )?;
            let c_hh = localize_cov(
                &symmetrized(&(&a_h * a_h.transpose() / n as f64)),
                od.obs_to_obs(),
                loc.length(),
            )?;
            let s = symmetrized(&(c_hh + model.obs_noise()));
            innovation_cholesky(&s)?.solve(&c_vh.transpose()).transpose()
        }
    };

    let obs_factor = psd_factor(model.obs_noise())?;
    let obs_stream = cfg.rng().child("obs-noise");
    let mut analysis = Vec::with_capacity(n);
    for (i, (m, hm)) in forecast.iter().zip(&observed).enumerate() {
        let eta = &obs_factor * obs_stream.index(i as u64).normal_vector(k);
        analysis.push(m + &gain * (y - eta - hm));
    }
    Ensemble::new(analysis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyadic_pair() -> Ensemble {
        Ensemble::new(vec![
            DVector::from_vec(vec![1.0, 4.0]),
            DVector::from_vec(vec![3.0, 8.0]),
        ])
        .unwrap()
    }

    #[test]
    fn unit_inflation_is_the_identity() {
        let e = Ensemble::new(vec![
            DVector::from_vec(vec![0.1, -0.7]),
            DVector::from_vec(vec![2.3, 0.4]),
            DVector::from_vec(vec![-1.1, 5.9]),
        ])
        .unwrap();
        let out = inflate(&e, 1.0).unwrap();
        assert_eq!(out.members(), e.members());
    }

    #[test]
    fn doubling_quadruples_the_covariance_exactly() {
        let e = dyadic_pair();
        let (_, cov) = ensemble_moments(&e);
        let (_, cov2) = ensemble_moments(&inflate(&e, 2.0).unwrap());
        assert_eq!(cov2, 4.0 * cov);
    }

    #[test]
    fn inflation_leaves_the_mean_in_place() {
        let e = Ensemble::new(vec![
            DVector::from_vec(vec![0.3, 1.7]),
            DVector::from_vec(vec![-0.9, 2.2]),
            DVector::from_vec(vec![0.13, -5.4]),
        ])
        .unwrap();
        let (before, _) = ensemble_moments(&e);
        let (after, _) = ensemble_moments(&inflate(&e, 1.7).unwrap());
        assert!((after - before).amax() <= 1e-14);
    }

    #[test]
    fn deflation_and_bad_factors_are_rejected() {
        let e = dyadic_pair();
        assert!(inflate(&e, 0.5).is_err());
        assert!(inflate(&e, f64::NAN).is_err());
    }

    #[test]
    fn huge_length_scale_leaves_the_covariance_alone() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.5]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
        let out = localize_cov(&c, &d, 1e12).unwrap();
        let rel = (&out - &c).amax() / c.amax();
        assert!(rel <= 1e-10);
    }

    #[test]
    fn vanishing_length_scale_keeps_only_the_diagonal() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.5]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
        let out = localize_cov(&c, &d, 1e-12).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.5]));
    }

    #[test]
    fn matched_distance_scales_an_entry_by_inverse_e() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let out = localize_cov(&c, &d, 1.0).unwrap();
        assert_eq!(out[(0, 1)], (-1.0f64).exp());
        assert_eq!(out[(0, 0)], 1.0);
    }

    #[test]
    fn taper_shape_mismatch_is_rejected() {
        let c = DMatrix::identity(2, 2);
        let d = DMatrix::zeros(3, 3);
        assert!(localize_cov(&c, &d, 1.0).is_err());
    }

    #[test]
    fn distance_matrices_are_validated() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(Localization::new(asym, 1.0).is_err());
        let negative = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(Localization::new(negative, 1.0).is_err());
        let hot_diag = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 0.0]);
        assert!(Localization::new(hot_diag, 1.0).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(Localization::new(ok.clone(), 0.0).is_err());
        assert!(Localization::new(ok, 2.5).is_ok());
    }

    use dakit_core::{Dynamics, Gaussian, ObsMap, StateSpaceModel};

    fn planar_members() -> Ensemble {
        Ensemble::new(vec![
            DVector::from_vec(vec![0.1, -0.4]),
            DVector::from_vec(vec![1.3, 0.6]),
            DVector::from_vec(vec![-0.8, 0.9]),
            DVector::from_vec(vec![0.5, -1.1]),
        ])
        .unwrap()
    }

    #[test]
    fn nonlinear_maps_need_observation_distances_to_taper() {
        let model = StateSpaceModel::new(
            Dynamics::identity(2),
            DMatrix::identity(2, 2) * 0.1,
            ObsMap::custom(|v| DVector::from_element(1, v[0] * v[0] + v[1])),
            DMatrix::identity(1, 1),
            Gaussian::standard(2),
        )
        .unwrap();
        let state_d = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let loc = Localization::new(state_d, 1.0).unwrap();
        let y = DVector::from_element(1, 0.5);

        let bare = EnKFConfig::new(RngStream::new(4)).with_localization(loc.clone());
        assert!(matches!(
            enkf_step(&planar_members(), &model, &y, &bare).unwrap_err(),
            CoreError::Config(_)
        ));

        let distances = ObsDistances::new(
            DMatrix::from_row_slice(2, 1, &[0.5, 0.5]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let full = EnKFConfig::new(RngStream::new(4))
            .with_localization(loc.with_obs_distances(distances).unwrap());
        assert!(enkf_step(&planar_members(), &model, &y, &full).is_ok());
    }

    #[test]
    fn tapering_a_linear_map_changes_the_update() {
        let model = StateSpaceModel::new(
            Dynamics::identity(2),
            DMatrix::identity(2, 2) * 0.1,
            ObsMap::Linear(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            DMatrix::identity(1, 1) * 0.2,
            Gaussian::standard(2),
        )
        .unwrap();
        let y = DVector::from_element(1, 1.5);
        let plain = EnKFConfig::new(RngStream::new(12));
        let state_d = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]);
        let tapered = EnKFConfig::new(RngStream::new(12))
            .with_localization(Localization::new(state_d, 0.5).unwrap());

        let out_plain = enkf_step(&planar_members(), &model, &y, &plain).unwrap();
        let out_tapered = enkf_step(&planar_members(), &model, &y, &tapered).unwrap();
        assert_ne!(out_plain.members(), out_tapered.members());
    }

    #[test]
    fn inflation_factor_below_one_is_rejected_in_config() {
        let cfg = EnKFConfig::new(RngStream::new(7));
        assert!(cfg.clone().with_inflation(0.9).is_err());
        assert!(cfg.with_inflation(1.05).is_ok());
    }
}
