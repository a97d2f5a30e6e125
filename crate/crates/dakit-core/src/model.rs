//! State-space models and synthetic twin-experiment data.
//!
//! A model pairs a one-step dynamics map with model noise `N(0, Sigma)`, an
//! observation map with observation noise `N(0, Gamma)`, and a Gaussian
//! initial condition. [`simulate`] rolls the pair forward:
//!
//! ```text
//! v_0 ~ init
//! v_{j+1} = Psi(v_j) + xi_j,      xi_j  ~ N(0, Sigma)
//! y_{j+1} = h(v_{j+1}) + eta_j+1, eta   ~ N(0, Gamma)
//! ```

use std::fmt;
use std::sync::Arc;

use dakit_autodiff::{TapeBuilder, Value, Var};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::CoreError;
use crate::gaussian::{psd_factor, Gaussian};
use crate::lorenz::Lorenz63;
use crate::rng::RngStream;
use crate::series::{ObservationSeries, Trajectory};

type MapFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Relative tolerance for the claimed-linearity probe check.
const PROBE_TOL: f64 = 1e-12;

/// One-step state transition map `Psi`.
#[derive(Clone)]
pub enum Dynamics {
    /// `v -> A v`.
    Linear(DMatrix<f64>),
    /// Lorenz-63 window flow (state dimension 3).
    Lorenz63(Lorenz63),
    /// Arbitrary map, optionally with a hand-coded Jacobian.
    Custom {
        f: MapFn,
        jacobian: Option<JacobianFn>,
    },
}

impl Dynamics {
    /// Identity map on `R^d`.
    pub fn identity(d: usize) -> Self {
        Dynamics::Linear(DMatrix::identity(d, d))
    }

    pub fn custom(f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Dynamics::Custom {
            f: Arc::new(f),
            jacobian: None,
        }
    }

    pub fn custom_with_jacobian(
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Dynamics::Custom {
            f: Arc::new(f),
            jacobian: Some(Arc::new(jacobian)),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Dynamics::Linear(a) => a * v,
            Dynamics::Lorenz63(map) => map.flow(v),
            Dynamics::Custom { f, .. } => f(v),
        }
    }

    /// Jacobian of the map at `v`. Custom maps without a supplied Jacobian
    /// report the capability as unavailable.
    pub fn jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>, CoreError> {
        match self {
            Dynamics::Linear(a) => Ok(a.clone()),
            Dynamics::Lorenz63(map) => Ok(map.jacobian(v)),
            Dynamics::Custom { jacobian, .. } => jacobian
                .as_ref()
                .map(|jac| jac(v))
                .ok_or(CoreError::Unavailable("dynamics Jacobian was not provided")),
        }
    }

    /// The matrix of a linear map, when the map is one.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Dynamics::Linear(a) => Some(a),
            _ => None,
        }
    }

    /// Records one application onto a tape. Only linear and Lorenz-63
    /// dynamics can be taped.
    pub fn record(&self, tb: &mut TapeBuilder, v: Var) -> Result<Var, CoreError> {
        match self {
            Dynamics::Linear(a) => {
                let a_var = tb.constant(Value::Matrix(a.clone()))?;
                Ok(tb.matvec(a_var, v)?)
            }
            Dynamics::Lorenz63(map) => Ok(map.record_flow(tb, v)?),
            Dynamics::Custom { .. } => {
                Err(CoreError::Unavailable("custom dynamics cannot be recorded on a tape"))
            }
        }
    }
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Linear(a) => f.debug_tuple("Linear").field(a).finish(),
            Dynamics::Lorenz63(map) => f.debug_tuple("Lorenz63").field(map).finish(),
            Dynamics::Custom { jacobian, .. } => f
                .debug_struct("Custom")
                .field("jacobian", &jacobian.is_some())
                .finish(),
        }
    }
}

/// Observation map `h`.
///
/// A map may carry a claimed matrix: the model constructor verifies the claim
/// on random probe vectors and rejects the pair when they disagree. Filters
/// that need a linear observation operator consult [`ObsMap::matrix`].
#[derive(Clone)]
pub enum ObsMap {
    /// `v -> H v`.
    Linear(DMatrix<f64>),
    /// Arbitrary map, optionally with a Jacobian and a claimed matrix.
    Custom {
        f: MapFn,
        jacobian: Option<JacobianFn>,
        matrix: Option<DMatrix<f64>>,
    },
}

impl ObsMap {
    pub fn custom(f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        ObsMap::Custom {
            f: Arc::new(f),
            jacobian: None,
            matrix: None,
        }
    }

    pub fn custom_with_jacobian(
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        ObsMap::Custom {
            f: Arc::new(f),
            jacobian: Some(Arc::new(jacobian)),
            matrix: None,
        }
    }

    /// A map claimed to coincide with multiplication by `matrix`; the claim
    /// is checked at model construction.
    pub fn custom_claiming_matrix(
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        matrix: DMatrix<f64>,
    ) -> Self {
        ObsMap::Custom {
            f: Arc::new(f),
            jacobian: None,
            matrix: Some(matrix),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ObsMap::Linear(h) => h * v,
            ObsMap::Custom { f, .. } => f(v),
        }
    }

    /// The observation matrix, present exactly when the map is linear.
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            ObsMap::Linear(h) => Some(h),
            ObsMap::Custom { matrix, .. } => matrix.as_ref(),
        }
    }

    pub fn jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>, CoreError> {
        match self {
            ObsMap::Linear(h) => Ok(h.clone()),
            ObsMap::Custom { jacobian, matrix, .. } => {
                if let Some(jac) = jacobian {
                    Ok(jac(v))
                } else if let Some(h) = matrix {
                    Ok(h.clone())
                } else {
                    Err(CoreError::Unavailable("observation Jacobian was not provided"))
                }
            }
        }
    }

    /// Records one application onto a tape; requires a linear map.
    pub fn record(&self, tb: &mut TapeBuilder, v: Var) -> Result<Var, CoreError> {
        match self.matrix() {
            Some(h) => {
                let h_var = tb.constant(Value::Matrix(h.clone()))?;
                Ok(tb.matvec(h_var, v)?)
            }
            None => Err(CoreError::Unavailable("nonlinear observation maps cannot be taped")),
        }
    }
}

impl fmt::Debug for ObsMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObsMap::Linear(h) => f.debug_tuple("Linear").field(h).finish(),
            ObsMap::Custom { jacobian, matrix, .. } => f
                .debug_struct("Custom")
                .field("jacobian", &jacobian.is_some())
                .field("matrix", matrix)
                .finish(),
        }
    }
}

/// A stochastic dynamics and data model.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    dim_state: usize,
    dim_obs: usize,
    dynamics: Dynamics,
    model_noise: DMatrix<f64>,
    obs: ObsMap,
    obs_noise: DMatrix<f64>,
    init: Gaussian,
}

impl StateSpaceModel {
    /// Builds a model with strictly positive definite observation noise.
    pub fn new(
        dynamics: Dynamics,
        model_noise: DMatrix<f64>,
        obs: ObsMap,
        obs_noise: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self, CoreError> {
        let model = Self::assemble(dynamics, model_noise, obs, obs_noise, init)?;
        if Cholesky::new(model.obs_noise.clone()).is_none() {
            return Err(CoreError::Config(
                "observation noise covariance must be positive definite".into(),
            ));
        }
        Ok(model)
    }

    /// Builds a model whose noise covariances may be semidefinite, including
    /// zero. Simulation handles such models; operations that invert a noise
    /// covariance report a configuration error when they meet one.
    pub fn with_degenerate_noise(
        dynamics: Dynamics,
        model_noise: DMatrix<f64>,
        obs: ObsMap,
        obs_noise: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self, CoreError> {
        Self::assemble(dynamics, model_noise, obs, obs_noise, init)
    }

    fn assemble(
        dynamics: Dynamics,
        model_noise: DMatrix<f64>,
        obs: ObsMap,
        obs_noise: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self, CoreError> {
        let d = init.dim();
        let model_noise = validate_noise_cov(model_noise, d, "model noise")?;
        if obs_noise.nrows() != obs_noise.ncols() {
            return Err(CoreError::Config(format!(
                "observation noise covariance is {}x{}, not square",
                obs_noise.nrows(),
                obs_noise.ncols()
            )));
        }
        let k = obs_noise.nrows();
        let obs_noise = validate_noise_cov(obs_noise, k, "observation noise")?;

        match &dynamics {
            Dynamics::Linear(a) => {
                if a.nrows() != d || a.ncols() != d {
                    return Err(CoreError::Config(format!(
                        "dynamics matrix is {}x{}, expected {d}x{d}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
            }
            Dynamics::Lorenz63(_) => {
                if d != 3 {
                    return Err(CoreError::Config(format!(
                        "Lorenz-63 dynamics need state dimension 3, got {d}"
                    )));
                }
            }
            Dynamics::Custom { f, .. } => {
                let probe = f(init.mean());
                if probe.len() != d {
                    return Err(CoreError::Config(format!(
                        "dynamics map returns length {}, expected {d}",
                        probe.len()
                    )));
                }
            }
        }

        if let Some(h) = obs.matrix() {
            if h.nrows() != k || h.ncols() != d {
                return Err(CoreError::Config(format!(
                    "observation matrix is {}x{}, expected {k}x{d}",
                    h.nrows(),
                    h.ncols()
                )));
            }
        }
        let probe_out = obs.apply(init.mean());
        if probe_out.len() != k {
            return Err(CoreError::Config(format!(
                "observation map returns length {}, expected {k}",
                probe_out.len()
            )));
        }
        if let ObsMap::Custom { f, matrix: Some(h), .. } = &obs {
            let probe_rng = RngStream::new(0x0b5e).child("linearity-probe");
            for i in 0..3 {
                let v = probe_rng.index(i).normal_vector(d);
                let direct = f(&v);
                let claimed = h * &v;
                let gap = (&direct - &claimed).amax();
                if gap > PROBE_TOL * (1.0 + claimed.amax()) {
                    return Err(CoreError::Config(format!(
                        "observation map disagrees with its claimed matrix by {gap:.3e} on probe {i}"
                    )));
                }
            }
        }

        Ok(Self {
            dim_state: d,
            dim_obs: k,
            dynamics,
            model_noise,
            obs,
            obs_noise,
            init,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn model_noise(&self) -> &DMatrix<f64> {
        &self.model_noise
    }

    pub fn obs_map(&self) -> &ObsMap {
        &self.obs
    }

    /// The observation matrix, when the observation map is linear.
    pub fn obs_matrix(&self) -> Option<&DMatrix<f64>> {
        self.obs.matrix()
    }

    pub fn obs_noise(&self) -> &DMatrix<f64> {
        &self.obs_noise
    }

    pub fn init(&self) -> &Gaussian {
        &self.init
    }

    /// Cholesky factor of the observation noise covariance; degenerate noise
    /// is a configuration error here.
    pub fn gamma_cholesky(&self) -> Result<Cholesky<f64, Dyn>, CoreError> {
        Cholesky::new(self.obs_noise.clone()).ok_or_else(|| {
            CoreError::Config("observation noise covariance is not positive definite".into())
        })
    }
}

fn validate_noise_cov(
    cov: DMatrix<f64>,
    d: usize,
    what: &str,
) -> Result<DMatrix<f64>, CoreError> {
    if cov.nrows() != d || cov.ncols() != d {
        return Err(CoreError::Config(format!(
            "{what} covariance is {}x{}, expected {d}x{d}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let g = Gaussian::new(DVector::zeros(d), cov)
        .map_err(|e| CoreError::Config(format!("{what} covariance: {e}")))?;
    Ok(g.into_parts().1)
}

/// Rolls the model forward `steps` times from a fresh draw of the initial
/// condition, observing every post-initial state.
///
/// All randomness is addressed through `rng`: the initial draw uses the child
/// stream "init", the model noise at step `j` uses "model-noise" index `j`,
/// and the observation noise uses "obs-noise" index `j`. Repeating a call
/// with the same stream reproduces the output bit for bit.
pub fn simulate(
    model: &StateSpaceModel,
    steps: usize,
    rng: &RngStream,
) -> Result<(Trajectory, ObservationSeries), CoreError> {
    if steps == 0 {
        return Err(CoreError::Argument("simulation horizon must be at least 1".into()));
    }
    let sigma_factor = psd_factor(model.model_noise())
        .map_err(|e| CoreError::Config(format!("model noise covariance: {e}")))?;
    let gamma_factor = psd_factor(model.obs_noise())
        .map_err(|e| CoreError::Config(format!("observation noise covariance: {e}")))?;
    let init_factor = psd_factor(model.init().cov())?;
    let d = model.dim_state();
    let k = model.dim_obs();

    let v0 = model.init().mean() + &init_factor * rng.child("init").normal_vector(d);
    let model_rng = rng.child("model-noise");
    let obs_rng = rng.child("obs-noise");

    let mut states = Vec::with_capacity(steps + 1);
    let mut obs = Vec::with_capacity(steps);
    states.push(v0);
    for j in 1..=steps {
        let xi = &sigma_factor * model_rng.index(j as u64).normal_vector(d);
        let v = model.dynamics().apply(states.last().expect("nonempty")) + xi;
        let eta = &gamma_factor * obs_rng.index(j as u64).normal_vector(k);
        obs.push(model.obs_map().apply(&v) + eta);
        states.push(v);
    }
    Ok((Trajectory::new(states)?, ObservationSeries::new(obs)?))
}
