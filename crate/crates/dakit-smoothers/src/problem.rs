//! The variational smoothing objective and its problem container.

use dakit_core::{CoreError, ObservationSeries, StateSpaceModel, Trajectory};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Whether model error is a penalized unknown or excluded outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// Minimize over the full state sequence; deviations from the dynamics
    /// are penalized through the model noise covariance.
    Weak,
    /// Minimize over the initial state only; the sequence is the exact
    /// rollout of the dynamics.
    Strong,
}

/// A smoothing window: model, observations `y_1..y_J`, and constraint mode.
///
/// Construction requires positive definite initial and observation noise
/// covariances; weak mode additionally requires positive definite model
/// noise. The inverse covariances are fixed here and reused by the
/// objective and the solver.
#[derive(Debug, Clone)]
pub struct FourDVarProblem {
    model: StateSpaceModel,
    obs: ObservationSeries,
    mode: ConstraintMode,
    init_inv: DMatrix<f64>,
    sigma_inv: Option<DMatrix<f64>>,
    gamma_inv: DMatrix<f64>,
}

fn inverse_of(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, CoreError> {
    Cholesky::new(cov.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| {
            CoreError::Config(format!("{what} must be positive definite for the quadratic objective"))
        })
}

impl FourDVarProblem {
    pub fn new(
        model: StateSpaceModel,
        obs: ObservationSeries,
        mode: ConstraintMode,
    ) -> Result<Self, CoreError> {
        if obs.dim() != model.dim_obs() {
            return Err(CoreError::Argument(format!(
                "observations have dimension {}, model observes {}",
                obs.dim(),
                model.dim_obs()
            )));
        }
        let init_inv = inverse_of(model.init().cov(), "initial covariance")?;
        let gamma_inv = inverse_of(model.obs_noise(), "observation noise covariance")?;
        let sigma_inv = match mode {
            ConstraintMode::Weak => Some(inverse_of(
                model.model_noise(),
                "model noise covariance",
            )?),
            ConstraintMode::Strong => None,
        };
        Ok(Self {
            model,
            obs,
            mode,
            init_inv,
            sigma_inv,
            gamma_inv,
        })
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    pub fn obs(&self) -> &ObservationSeries {
        &self.obs
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    /// Window length `J`; trajectories over this window hold `J + 1` states.
    pub fn horizon(&self) -> usize {
        self.obs.horizon()
    }

    pub(crate) fn init_inv(&self) -> &DMatrix<f64> {
        &self.init_inv
    }

    pub(crate) fn sigma_inv(&self) -> &DMatrix<f64> {
        self.sigma_inv
            .as_ref()
            .expect("model error penalty only exists in weak mode")
    }

    pub(crate) fn gamma_inv(&self) -> &DMatrix<f64> {
        &self.gamma_inv
    }

    pub(crate) fn check_states(&self, v: &Trajectory) -> Result<(), CoreError> {
        if v.dim() != self.model.dim_state() {
            return Err(CoreError::Argument(format!(
                "trajectory has dimension {}, model dimension is {}",
                v.dim(),
                self.model.dim_state()
            )));
        }
        if v.horizon() != self.horizon() {
            return Err(CoreError::Argument(format!(
                "trajectory covers {} steps, the window holds {} observations",
                v.horizon(),
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Sum of the three penalty groups over explicit states.
    pub(crate) fn weak_value(&self, states: &[DVector<f64>]) -> f64 {
        let r0 = &states[0] - self.model.init().mean();
        let mut total = 0.5 * quad(&self.init_inv, &r0);
        let sigma_inv = self.sigma_inv();
        for j in 0..self.horizon() {
            let rd = &states[j + 1] - self.model.dynamics().apply(&states[j]);
            total += 0.5 * quad(sigma_inv, &rd);
            let ro = self.obs.obs(j + 1) - self.model.obs_map().apply(&states[j + 1]);
            total += 0.5 * quad(&self.gamma_inv, &ro);
        }
        total
    }

    /// Rollout from `v0` and the objective with dynamics enforced exactly.
    pub(crate) fn strong_value(&self, v0: &DVector<f64>) -> (f64, Vec<DVector<f64>>) {
        let r0 = v0 - self.model.init().mean();
        let mut total = 0.5 * quad(&self.init_inv, &r0);
        let mut states = Vec::with_capacity(self.horizon() + 1);
        states.push(v0.clone());
        for j in 0..self.horizon() {
            let next = self.model.dynamics().apply(&states[j]);
            let ro = self.obs.obs(j + 1) - self.model.obs_map().apply(&next);
            total += 0.5 * quad(&self.gamma_inv, &ro);
            states.push(next);
        }
        (total, states)
    }
}

fn quad(inv: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    (inv * r).dot(r)
}

/// Negative log posterior density of a trajectory, up to the data-dependent
/// constant.
///
/// Weak mode charges the initial deviation, every model-error increment
/// `v_{j+1} - Psi(v_j)`, and every data misfit. Strong mode replaces the
/// supplied states beyond the first with the exact rollout of the dynamics,
/// so only the initial state enters.
pub fn fourdvar_objective(p: &FourDVarProblem, v: &Trajectory) -> Result<f64, CoreError> {
    p.check_states(v)?;
    Ok(match p.mode() {
        ConstraintMode::Weak => p.weak_value(v.states()),
        ConstraintMode::Strong => p.strong_value(v.state(0)).0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dakit_core::{simulate, Dynamics, Gaussian, ObsMap, RngStream};

    fn identity_model(gamma: f64, sigma: f64) -> StateSpaceModel {
        StateSpaceModel::with_degenerate_noise(
            Dynamics::identity(1),
            DMatrix::from_element(1, 1, sigma),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::from_element(1, 1, gamma),
            Gaussian::standard(1),
        )
        .unwrap()
    }

    fn scalar_states(values: &[f64]) -> Trajectory {
        Trajectory::new(values.iter().map(|&v| DVector::from_element(1, v)).collect()).unwrap()
    }

    #[test]
    fn a_noise_free_consistent_window_costs_nothing() {
        let model = StateSpaceModel::new(
            Dynamics::Linear(DMatrix::from_element(1, 1, 0.8)),
            DMatrix::from_element(1, 1, 0.3),
            ObsMap::Linear(DMatrix::identity(1, 1)),
            DMatrix::from_element(1, 1, 0.5),
            Gaussian::new(DVector::from_element(1, 2.0), DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap();
        let states = scalar_states(&[2.0, 1.6, 1.28]);
        let obs = ObservationSeries::new(vec![
            DVector::from_element(1, 1.6),
            DVector::from_element(1, 1.28),
        ])
        .unwrap();
        for mode in [ConstraintMode::Weak, ConstraintMode::Strong] {
            let p = FourDVarProblem::new(model.clone(), obs.clone(), mode).unwrap();
            assert!(fourdvar_objective(&p, &states).unwrap().abs() <= 1e-28);
        }
    }

    #[test]
    fn the_unit_window_adds_its_three_penalties() {
        let model = identity_model(1.0, 1.0);
        let obs = ObservationSeries::new(vec![DVector::from_element(1, 0.0)]).unwrap();
        let p = FourDVarProblem::new(model, obs, ConstraintMode::Weak).unwrap();
        let v = scalar_states(&[1.0, 1.0]);
        assert_eq!(fourdvar_objective(&p, &v).unwrap(), 1.0);
    }

    #[test]
    fn strong_mode_reads_only_the_initial_state() {
        let model = identity_model(1.0, 0.0);
        let obs = ObservationSeries::new(vec![
            DVector::from_element(1, 0.5),
            DVector::from_element(1, 0.5),
        ])
        .unwrap();
        let p = FourDVarProblem::new(model, obs, ConstraintMode::Strong).unwrap();
        let tidy = scalar_states(&[1.0, 1.0, 1.0]);
        let scrambled = scalar_states(&[1.0, -40.0, 7.0]);
        assert_eq!(
            fourdvar_objective(&p, &tidy).unwrap(),
            fourdvar_objective(&p, &scrambled).unwrap()
        );
    }

    #[test]
    fn weak_mode_needs_invertible_model_noise() {
        let degenerate = identity_model(1.0, 0.0);
        let obs = ObservationSeries::new(vec![DVector::from_element(1, 0.0)]).unwrap();
        assert!(matches!(
            FourDVarProblem::new(degenerate.clone(), obs.clone(), ConstraintMode::Weak)
                .unwrap_err(),
            CoreError::Config(_)
        ));
        assert!(FourDVarProblem::new(degenerate, obs, ConstraintMode::Strong).is_ok());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let model = identity_model(1.0, 1.0);
        let obs = ObservationSeries::new(vec![DVector::from_element(1, 0.3)]).unwrap();
        let p = FourDVarProblem::new(model, obs, ConstraintMode::Weak).unwrap();
        let too_long = scalar_states(&[0.0, 0.1, 0.2]);
        assert!(fourdvar_objective(&p, &too_long).is_err());
        let flat = Trajectory::new(vec![DVector::zeros(2), DVector::zeros(2)]).unwrap();
        assert!(fourdvar_objective(&p, &flat).is_err());
    }

    #[test]
    fn simulated_windows_have_finite_cost() {
        let model = identity_model(0.5, 0.25);
        let (truth, obs) = simulate(&model, 4, &RngStream::new(40)).unwrap();
        let p = FourDVarProblem::new(model, obs, ConstraintMode::Weak).unwrap();
        let value = fourdvar_objective(&p, &truth).unwrap();
        assert!(value.is_finite() && value > 0.0);
    }
}
