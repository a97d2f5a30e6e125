//! Monte Carlo expectation-maximization for models whose dynamics carry a
//! free parameter alongside an unknown model-noise covariance.
//!
//! Each outer iteration draws smoother samples at the current parameters,
//! re-estimates the model-noise covariance from sample residuals, and then
//! runs a few gradient-ascent steps on the sample-average residual fit of
//! the dynamics parameter, holding that covariance fixed.

use std::rc::Rc;
use std::sync::Arc;

use dakit_autodiff::{record, AdError, TapeBuilder, Value, Var};
use dakit_core::{
    gaussian_sample, CoreError, Dynamics, Gaussian, ObsMap, ObservationSeries, RngStream,
    StateSpaceModel,
};
use dakit_filters::{enkf_step, EnKFConfig};
use nalgebra::{DMatrix, DVector};

use crate::em::em_update_covariances;
use crate::params::ParamVector;
use crate::sampling::{exact_smoother_samples, SmootherSampleSet};

type ApplyFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type LinearFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type RecordFn = dyn Fn(&mut TapeBuilder, Var, &DVector<f64>) -> Result<Var, AdError>;

/// Dynamics indexed by a flat parameter vector.
///
/// `apply` evaluates the map numerically, `record` expresses it in tape
/// operations at a fixed state so residuals are differentiable in the
/// parameter, and `linear` (when present) exposes the dynamics matrix so
/// the exact smoother can be used for the expectation step.
#[derive(Clone)]
pub struct DynamicsFamily {
    dim_state: usize,
    dim_params: usize,
    apply: Arc<ApplyFn>,
    linear: Option<Arc<LinearFn>>,
    record: Rc<RecordFn>,
}

impl DynamicsFamily {
    pub fn new(
        dim_state: usize,
        dim_params: usize,
        apply: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        record: impl Fn(&mut TapeBuilder, Var, &DVector<f64>) -> Result<Var, AdError> + 'static,
    ) -> Self {
        Self {
            dim_state,
            dim_params,
            apply: Arc::new(apply),
            linear: None,
            record: Rc::new(record),
        }
    }

    /// `v -> theta[0] * v`.
    pub fn scale(dim_state: usize) -> Self {
        let mut family = Self::new(
            dim_state,
            1,
            |theta: &DVector<f64>, v: &DVector<f64>| v * theta[0],
            move |tb, theta, v| {
                let t = tb.index(theta, 0)?;
                let state = tb.constant(Value::Vector(v.clone()))?;
                tb.mul(t, state)
            },
        );
        family.linear = Some(Arc::new(move |theta: &DVector<f64>| {
            DMatrix::identity(dim_state, dim_state) * theta[0]
        }));
        family
    }

    /// `v -> A v` with `theta` holding the entries of `A` row by row.
    pub fn matrix(dim_state: usize) -> Self {
        let d = dim_state;
        let mut family = Self::new(
            d,
            d * d,
            move |theta: &DVector<f64>, v: &DVector<f64>| {
                DMatrix::from_row_slice(d, d, theta.as_slice()) * v
            },
            move |tb, theta, v| {
                let entries = (0..d * d)
                    .map(|i| tb.index(theta, i))
                    .collect::<Result<Vec<_>, _>>()?;
                let a = tb.pack_matrix(d, d, &entries)?;
                let state = tb.constant(Value::Vector(v.clone()))?;
                tb.matvec(a, state)
            },
        );
        family.linear = Some(Arc::new(move |theta: &DVector<f64>| {
            DMatrix::from_row_slice(d, d, theta.as_slice())
        }));
        family
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_params(&self) -> usize {
        self.dim_params
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }

    pub fn apply(&self, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        (self.apply)(theta, v)
    }
}

/// A state-space model with parameterized dynamics and unknown model noise;
/// the observation operator, observation noise, and initial law are fixed.
pub struct ParameterizedModel {
    family: DynamicsFamily,
    obs_matrix: DMatrix<f64>,
    obs_noise: DMatrix<f64>,
    init: Gaussian,
}

impl ParameterizedModel {
    pub fn new(
        family: DynamicsFamily,
        obs_matrix: DMatrix<f64>,
        obs_noise: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self, CoreError> {
        if obs_matrix.ncols() != family.dim_state() || init.dim() != family.dim_state() {
            return Err(CoreError::Argument(format!(
                "family acts on dimension {}, observation matrix has {} columns, prior has dimension {}",
                family.dim_state(),
                obs_matrix.ncols(),
                init.dim()
            )));
        }
        if obs_noise.nrows() != obs_matrix.nrows() || !obs_noise.is_square() {
            return Err(CoreError::Argument(format!(
                "observation noise must be {r}x{r}, got {}x{}",
                obs_noise.nrows(),
                obs_noise.ncols(),
                r = obs_matrix.nrows()
            )));
        }
        Ok(Self {
            family,
            obs_matrix,
            obs_noise,
            init,
        })
    }

    pub fn family(&self) -> &DynamicsFamily {
        &self.family
    }

    /// Instantiates the model at given dynamics parameters and model noise.
    pub fn model_at(
        &self,
        theta: &DVector<f64>,
        sigma: &DMatrix<f64>,
    ) -> Result<StateSpaceModel, CoreError> {
        if theta.len() != self.family.dim_params() {
            return Err(CoreError::Argument(format!(
                "family takes {} parameters, got {}",
                self.family.dim_params(),
                theta.len()
            )));
        }
        let dynamics = match &self.family.linear {
            Some(lin) => Dynamics::Linear(lin(theta)),
            None => {
                let apply = Arc::clone(&self.family.apply);
                let at = theta.clone();
                Dynamics::custom(move |v: &DVector<f64>| apply(&at, v))
            }
        };
        StateSpaceModel::new(
            dynamics,
            sigma.clone(),
            ObsMap::Linear(self.obs_matrix.clone()),
            self.obs_noise.clone(),
            self.init.clone(),
        )
    }
}

/// Iteration counts and step rule for the alternating scheme.
#[derive(Debug, Clone)]
pub struct McEmConfig {
    pub outer: usize,
    pub inner: usize,
    pub samples: usize,
    pub step_init: f64,
    pub grad_tol: f64,
}

impl McEmConfig {
    pub fn new(outer: usize, inner: usize, samples: usize) -> Self {
        Self {
            outer,
            inner,
            samples,
            step_init: 0.1,
            grad_tol: 1e-10,
        }
    }
}

/// Parameter history of a run: one entry per completed outer iteration plus
/// the starting point, with the dynamics parameters followed by the
/// model-noise covariance in log-Cholesky coordinates.
#[derive(Debug, Clone)]
pub struct McEmTrace {
    pub params: Vec<ParamVector>,
    pub objectives: Vec<Vec<f64>>,
    pub exact_estep: bool,
    pub aborted: Option<String>,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-16;

/// Alternates smoother sampling, covariance re-estimation, and gradient
/// ascent on the dynamics parameter.
///
/// Linear families use exact joint-Gaussian smoother samples. Nonlinear
/// families fall back to ensemble filter paths, which track the filtering
/// rather than the smoothing law; the trace flags this with
/// `exact_estep: false`. The residual-fit objective holds the freshly
/// re-estimated covariance fixed during the inner ascent, so its value is
/// comparable across inner steps. A non-finite gradient or an exhausted
/// line search aborts the run, returning the history up to that point.
pub fn mc_em_run(
    pmodel: &ParameterizedModel,
    obs: &ObservationSeries,
    theta0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    config: &McEmConfig,
    rng: &RngStream,
) -> Result<McEmTrace, CoreError> {
    let family = pmodel.family();
    if theta0.len() != family.dim_params() || theta0.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Argument(format!(
            "starting parameters must be {} finite values",
            family.dim_params()
        )));
    }
    if config.outer == 0 {
        return Err(CoreError::Argument("at least one outer iteration is required".into()));
    }
    if config.samples == 0 {
        return Err(CoreError::Argument("at least one smoother sample is required".into()));
    }
    if !(config.step_init > 0.0 && config.step_init.is_finite()) {
        return Err(CoreError::Argument(format!(
            "initial step must be positive and finite, got {}",
            config.step_init
        )));
    }
    if obs.dim() != pmodel.obs_matrix.nrows() {
        return Err(CoreError::Argument(format!(
            "observations have dimension {}, model observes {}",
            obs.dim(),
            pmodel.obs_matrix.nrows()
        )));
    }

    let snapshot = |theta: &DVector<f64>, sigma: &DMatrix<f64>| {
        ParamVector::from_parts(theta, Some(sigma), None)
    };

    let exact = family.is_linear();
    let mut theta = theta0.clone();
    let mut sigma = sigma0.clone();
    let mut params = vec![snapshot(&theta, &sigma)?];
    let mut objectives = Vec::new();
    let mut aborted: Option<String> = None;

    'outer: for l in 0..config.outer {
        let model = pmodel.model_at(&theta, &sigma)?;
        let stream = rng.child("estep").index(l as u64);
        let samples = if exact {
            exact_smoother_samples(&model, obs, config.samples, &stream)?
        } else {
            filter_path_samples(&model, obs, config.samples, &stream)?
        };

        let (_, sigma_new) = em_update_covariances(&model, obs, &samples)?;
        sigma = sigma_new;

        let mut tape = residual_fit_tape(family, &samples, &sigma, &theta)?;
        let value0 = tape.outputs()[0]
            .as_scalar()
            .expect("the residual fit tape has a scalar output");
        let mut value = value0;
        let mut inner_trace = vec![value0];

        for _ in 0..config.inner {
            let grads = tape.gradient(&[Value::Vector(theta.clone())])?;
            let g = grads[0]
                .as_vector()
                .expect("gradient of a vector input is a vector")
                .clone();
            if g.iter().any(|x| !x.is_finite()) {
                aborted = Some("the residual fit gradient is not finite".into());
                objectives.push(inner_trace);
                params.push(snapshot(&theta, &sigma)?);
                break 'outer;
            }
            let slope = g.norm_squared();
            if slope.sqrt() <= config.grad_tol {
                break;
            }
            let mut alpha = config.step_init;
            let mut accepted = false;
            while alpha >= MIN_STEP {
                let trial = &theta + &g * alpha;
                let outcome = tape
                    .replay(&[Value::Vector(trial.clone())])
                    .ok()
                    .and_then(|out| out[0].as_scalar())
                    .filter(|v| v.is_finite());
                if let Some(trial_value) = outcome {
                    if trial_value >= value + ARMIJO_C * alpha * slope {
                        theta = trial;
                        value = trial_value;
                        inner_trace.push(value);
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                aborted = Some("the line search found no acceptable ascent step".into());
                objectives.push(inner_trace);
                params.push(snapshot(&theta, &sigma)?);
                break 'outer;
            }
        }

        objectives.push(inner_trace);
        params.push(snapshot(&theta, &sigma)?);
    }

    Ok(McEmTrace {
        params,
        objectives,
        exact_estep: exact,
        aborted,
    })
}

/// Ensemble filter pass returning one trajectory per member. Members carry
/// the filtering law at each step, not the smoothing law.
fn filter_path_samples(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    m: usize,
    rng: &RngStream,
) -> Result<SmootherSampleSet, CoreError> {
    let mut ens = gaussian_sample(model.init(), m, &rng.child("init"))?;
    let mut paths: Vec<Vec<DVector<f64>>> =
        ens.members().iter().map(|v| vec![v.clone()]).collect();
    for j in 1..=obs.horizon() {
        let cfg = EnKFConfig::new(rng.child("step").index(j as u64));
        ens = enkf_step(&ens, model, obs.obs(j), &cfg)?;
        for (path, member) in paths.iter_mut().zip(ens.members()) {
            path.push(member.clone());
        }
    }
    let trajectories = paths
        .into_iter()
        .map(dakit_core::Trajectory::new)
        .collect::<Result<Vec<_>, _>>()?;
    SmootherSampleSet::new(trajectories)
}

/// Records the sample-average residual fit of the dynamics parameter,
/// `-1/(2N) * sum over samples and steps of |v_{j+1} - Psi_theta(v_j)|^2`
/// weighted by the inverse of `sigma`, as a tape in `theta`.
fn residual_fit_tape(
    family: &DynamicsFamily,
    samples: &SmootherSampleSet,
    sigma: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<dakit_autodiff::Tape, CoreError> {
    let inputs = [Value::Vector(theta.clone())];
    let tape = record(&inputs, |tb, vars| {
        let sigma_c = tb.constant(Value::Matrix(sigma.clone()))?;
        let mut total = None;
        for n in 0..samples.len() {
            let path = samples.trajectory(n);
            for j in 0..path.horizon() {
                let psi = (family.record)(tb, vars[0], path.state(j))?;
                let next = tb.constant(Value::Vector(path.state(j + 1).clone()))?;
                let rd = tb.sub(next, psi)?;
                let solved = tb.cholesky_solve(sigma_c, rd)?;
                let quad = tb.dot(rd, solved)?;
                total = Some(match total {
                    None => quad,
                    Some(t) => tb.add(t, quad)?,
                });
            }
        }
        let sum = total.expect("sample sets are nonempty with positive horizon");
        let scaled = tb.smul(sum, -0.5 / samples.len() as f64)?;
        Ok(vec![scaled])
    })?;
    Ok(tape)
}
