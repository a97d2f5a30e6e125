//! Marginal likelihood of the data under a Gaussian predictive ansatz, and
//! maximum likelihood estimation by gradient ascent through the filter.
//!
//! The log-likelihood decomposes over one-step predictive marginals
//! `N(H m_hat, H C_hat H' + Gamma)`. Evaluation runs the filter recursion
//! numerically; for estimation the whole recursion is recorded on a tape so
//! the gradient with respect to the parameters comes out of a reverse sweep.

use std::f64::consts::PI;
use std::rc::Rc;

use dakit_autodiff::{record, AdError, Shape, Tape, TapeBuilder, Value, Var};
use dakit_core::{CoreError, Gaussian, ObservationSeries, StateSpaceModel};
use dakit_filters::{exkf_step, KalmanState};
use nalgebra::{DMatrix, DVector};

use crate::params::{triangle_len, ParamLayout, ParamVector};

/// Log density of the observation window under the filter's predictive
/// marginals, constants included.
///
/// Exact for linear dynamics; for nonlinear dynamics the moments come from
/// the extended-filter recursion, making this a Gaussian-ansatz
/// approximation.
pub fn kf_loglik(model: &StateSpaceModel, obs: &ObservationSeries) -> Result<f64, CoreError> {
    let h = model
        .obs_matrix()
        .ok_or_else(|| {
            CoreError::Config(
                "the marginal likelihood needs a linear observation map".into(),
            )
        })?
        .clone();
    if obs.dim() != model.dim_obs() {
        return Err(CoreError::Argument(format!(
            "observations have dimension {}, model observes {}",
            obs.dim(),
            model.dim_obs()
        )));
    }
    let mut state = KalmanState::initial(model.init().clone(), model.dim_obs());
    let mut total = 0.0;
    for j in 1..=obs.horizon() {
        state = exkf_step(&state, model, obs.obs(j), None, None)?;
        let s = &h * state.forecast().cov() * h.transpose() + model.obs_noise();
        let marginal = Gaussian::new(&h * state.forecast().mean(), (&s + s.transpose()) * 0.5)?;
        total += marginal.logpdf(obs.obs(j))?;
    }
    Ok(total)
}

/// Parameter-dependent pieces of a linear-Gaussian model, as tape variables.
pub struct KfParts {
    pub dynamics: Var,
    pub model_noise: Var,
    pub obs_noise: Var,
}

type BuildFn = dyn Fn(&mut TapeBuilder, Var) -> Result<KfParts, AdError>;

/// A family of linear-Gaussian models indexed by a flat parameter vector,
/// with the dependence expressed in tape operations so the likelihood is
/// differentiable.
#[derive(Clone)]
pub struct KfFamily {
    dim_state: usize,
    dim_obs: usize,
    layout: ParamLayout,
    obs_matrix: DMatrix<f64>,
    init: Gaussian,
    build: Rc<BuildFn>,
}

impl KfFamily {
    pub fn new(
        layout: ParamLayout,
        obs_matrix: DMatrix<f64>,
        init: Gaussian,
        build: impl Fn(&mut TapeBuilder, Var) -> Result<KfParts, AdError> + 'static,
    ) -> Result<Self, CoreError> {
        if obs_matrix.ncols() != init.dim() {
            return Err(CoreError::Argument(format!(
                "observation matrix acts on dimension {}, prior has dimension {}",
                obs_matrix.ncols(),
                init.dim()
            )));
        }
        Ok(Self {
            dim_state: init.dim(),
            dim_obs: obs_matrix.nrows(),
            layout,
            obs_matrix,
            init,
            build: Rc::new(build),
        })
    }

    /// Dynamics matrix entries as parameters, noise covariances fixed.
    pub fn linear_dynamics(
        obs_matrix: DMatrix<f64>,
        init: Gaussian,
        sigma: DMatrix<f64>,
        gamma: DMatrix<f64>,
    ) -> Result<Self, CoreError> {
        let d = init.dim();
        let layout = ParamLayout::new(d * d, None, None);
        Self::new(layout, obs_matrix, init, move |tb, theta| {
            let entries = (0..d * d)
                .map(|i| tb.index(theta, i))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(KfParts {
                dynamics: tb.pack_matrix(d, d, &entries)?,
                model_noise: tb.constant(Value::Matrix(sigma.clone()))?,
                obs_noise: tb.constant(Value::Matrix(gamma.clone()))?,
            })
        })
    }

    /// Dynamics matrix entries plus a log-Cholesky block for the model
    /// noise; observation noise fixed.
    pub fn linear_dynamics_and_model_noise(
        obs_matrix: DMatrix<f64>,
        init: Gaussian,
        gamma: DMatrix<f64>,
    ) -> Result<Self, CoreError> {
        let d = init.dim();
        let layout = ParamLayout::new(d * d, Some(d), None);
        Self::new(layout, obs_matrix, init, move |tb, theta| {
            let entries = (0..d * d)
                .map(|i| tb.index(theta, i))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(KfParts {
                dynamics: tb.pack_matrix(d, d, &entries)?,
                model_noise: decode_covariance(tb, theta, d * d, d)?,
                obs_noise: tb.constant(Value::Matrix(gamma.clone()))?,
            })
        })
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Records the map `theta -> log-likelihood of obs` as a tape, evaluated
    /// at `theta`. Replaying the tape at other parameter values re-evaluates
    /// the same recursion.
    pub fn loglik_tape(
        &self,
        obs: &ObservationSeries,
        theta: &DVector<f64>,
    ) -> Result<Tape, CoreError> {
        if theta.len() != self.layout.len() {
            return Err(CoreError::Argument(format!(
                "family takes {} parameters, got {}",
                self.layout.len(),
                theta.len()
            )));
        }
        if obs.dim() != self.dim_obs {
            return Err(CoreError::Argument(format!(
                "observations have dimension {}, family observes {}",
                obs.dim(),
                self.dim_obs
            )));
        }
        let build = Rc::clone(&self.build);
        let (d, k) = (self.dim_state, self.dim_obs);
        let inputs = [Value::Vector(theta.clone())];
        let tape = record(&inputs, |tb, vars| {
            let parts = (build)(tb, vars[0])?;
            check_shape(tb, parts.dynamics, d, d, "dynamics")?;
            check_shape(tb, parts.model_noise, d, d, "model noise")?;
            check_shape(tb, parts.obs_noise, k, k, "observation noise")?;

            let h = tb.constant(Value::Matrix(self.obs_matrix.clone()))?;
            let ht = tb.constant(Value::Matrix(self.obs_matrix.transpose()))?;
            let at = tb.transpose(parts.dynamics)?;
            let step_const = tb.constant(Value::Scalar(-0.5 * k as f64 * (2.0 * PI).ln()))?;
            let mut m = tb.constant(Value::Vector(self.init.mean().clone()))?;
            let mut c = tb.constant(Value::Matrix(self.init.cov().clone()))?;
            let mut total = None;
            for j in 1..=obs.horizon() {
                m = tb.matvec(parts.dynamics, m)?;
                let ac = tb.matmul(parts.dynamics, c)?;
                let acat = tb.matmul(ac, at)?;
                let forecast = tb.add(acat, parts.model_noise)?;
                c = symmetrize(tb, forecast)?;

                let hc = tb.matmul(h, c)?;
                let hcht = tb.matmul(hc, ht)?;
                let s = tb.add(hcht, parts.obs_noise)?;
                let y = tb.constant(Value::Vector(obs.obs(j).clone()))?;
                let hm = tb.matvec(h, m)?;
                let innov = tb.sub(y, hm)?;

                let solved = tb.cholesky_solve(s, innov)?;
                let quad = tb.dot(innov, solved)?;
                let ld = tb.logdet(s)?;
                let q_half = tb.smul(quad, -0.5)?;
                let ld_half = tb.smul(ld, -0.5)?;
                let fit = tb.add(q_half, ld_half)?;
                let term = tb.add(fit, step_const)?;
                total = Some(match total {
                    None => term,
                    Some(t) => tb.add(t, term)?,
                });

                let s_inv_hc = tb.cholesky_solve(s, hc)?;
                let gain = tb.transpose(s_inv_hc)?;
                let moved = tb.matvec(gain, innov)?;
                m = tb.add(m, moved)?;
                let shaved = tb.matmul(gain, hc)?;
                let analysis = tb.sub(c, shaved)?;
                c = symmetrize(tb, analysis)?;
            }
            Ok(vec![total.expect("observation series are nonempty")])
        })?;
        Ok(tape)
    }
}

fn check_shape(
    tb: &TapeBuilder,
    v: Var,
    rows: usize,
    cols: usize,
    what: &'static str,
) -> Result<(), AdError> {
    match tb.shape(v) {
        Shape::Matrix(r, c) if r == rows && c == cols => Ok(()),
        other => Err(AdError::BadOperand {
            op: "kf_family",
            expected: what,
            got: other,
        }),
    }
}

fn symmetrize(tb: &mut TapeBuilder, m: Var) -> Result<Var, AdError> {
    let mt = tb.transpose(m)?;
    let sum = tb.add(m, mt)?;
    tb.smul(sum, 0.5)
}

/// Builds a covariance on tape from log-Cholesky coordinates stored in
/// `theta` starting at `offset`.
pub fn decode_covariance(
    tb: &mut TapeBuilder,
    theta: Var,
    offset: usize,
    d: usize,
) -> Result<Var, AdError> {
    let zero = tb.constant(Value::Scalar(0.0))?;
    let mut entries = vec![zero; d * d];
    let mut idx = offset;
    for i in 0..d {
        for j in 0..=i {
            let coord = tb.index(theta, idx)?;
            entries[i * d + j] = if i == j { tb.exp(coord)? } else { coord };
            idx += 1;
        }
    }
    let l = tb.pack_matrix(d, d, &entries)?;
    let lt = tb.transpose(l)?;
    tb.matmul(l, lt)
}

/// Settings for likelihood ascent.
#[derive(Debug, Clone)]
pub struct MleConfig {
    pub theta0: DVector<f64>,
    pub steps: usize,
    pub step_init: f64,
    pub grad_tol: f64,
}

impl MleConfig {
    pub fn new(theta0: DVector<f64>) -> Self {
        Self {
            theta0,
            steps: 100,
            step_init: 0.1,
            grad_tol: 1e-8,
        }
    }
}

/// Outcome of likelihood ascent: the final parameters, the log-likelihood
/// after each accepted step, and the reason for stopping early if the run
/// aborted.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub params: ParamVector,
    pub loglik_trace: Vec<f64>,
    pub aborted: Option<String>,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-16;

/// Gradient ascent on the marginal likelihood of a differentiable model
/// family, with Armijo backtracking.
///
/// Trial parameters that break the recursion (an indefinite covariance, a
/// non-finite value) are rejected by the line search rather than reported
/// as errors; a line search that cannot find any acceptable step aborts the
/// run, returning the trace so far.
pub fn fit_mle_autodiff_kf(
    family: &KfFamily,
    obs: &ObservationSeries,
    config: &MleConfig,
) -> Result<MleFit, CoreError> {
    if config.steps == 0 {
        return Err(CoreError::Argument("at least one ascent step is required".into()));
    }
    if !(config.step_init > 0.0 && config.step_init.is_finite()) {
        return Err(CoreError::Argument(format!(
            "initial step must be positive and finite, got {}",
            config.step_init
        )));
    }
    let mut theta = config.theta0.clone();
    let mut tape = family.loglik_tape(obs, &theta)?;
    let mut value = tape.outputs()[0]
        .as_scalar()
        .expect("the likelihood tape has a scalar output");
    if !value.is_finite() {
        return Err(CoreError::Argument(
            "the likelihood is not finite at the starting parameters".into(),
        ));
    }
    let mut trace = vec![value];
    let mut aborted = None;

    for _ in 0..config.steps {
        let grads = tape.gradient(&[Value::Vector(theta.clone())])?;
        let g = grads[0]
            .as_vector()
            .expect("gradient of a vector input is a vector")
            .clone();
        if g.iter().any(|x| !x.is_finite()) {
            aborted = Some("the likelihood gradient is not finite".into());
            break;
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
                    trace.push(value);
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            aborted = Some("the line search found no acceptable ascent step".into());
            break;
        }
    }

    Ok(MleFit {
        params: ParamVector::new(theta, *family.layout())?,
        loglik_trace: trace,
        aborted,
    })
}
