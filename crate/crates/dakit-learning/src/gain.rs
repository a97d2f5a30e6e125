//! Learning a constant filter gain by minimizing the time-averaged trace of
//! the error covariance it induces.
//!
//! For a fixed gain `K` the estimation error of the filter
//! `m_{j+1} = (I - K H)(A m_j) + K y_{j+1}` has covariance obeying
//! `Chat_{j+1} = A C_j A' + Sigma` and
//! `C_{j+1} = (I - K H) Chat_{j+1} (I - K H)' + K Gamma K'`. The objective
//! averages `tr C_j` over the window; its gradient in `K` comes from a
//! reverse sweep over the recursion recorded on tape.

use dakit_autodiff::{record, Tape, TapeBuilder, Value, Var};
use dakit_core::CoreError;
use nalgebra::DMatrix;

/// Step budget and rule for the gain descent.
#[derive(Debug, Clone)]
pub struct GainConfig {
    pub steps: usize,
    pub step_init: f64,
    pub grad_tol: f64,
    /// Starting gain; zero when absent.
    pub gain0: Option<DMatrix<f64>>,
}

impl GainConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            step_init: 0.5,
            grad_tol: 1e-10,
            gain0: None,
        }
    }
}

/// Result of the descent: the gain, the objective after each accepted step,
/// whether any trial gain drove the covariance recursion out of range, and
/// the reason for stopping early if the run aborted.
#[derive(Debug, Clone)]
pub struct GainFit {
    pub gain: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
    pub divergence_encountered: bool,
    pub aborted: Option<String>,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-16;
const DIVERGENCE_CAP: f64 = 1e12;

struct GainDims {
    d: usize,
    k: usize,
}

fn check_gain_problem(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    j_horizon: usize,
) -> Result<GainDims, CoreError> {
    let d = a.nrows();
    let k = h.nrows();
    if !a.is_square() || sigma.shape() != (d, d) || c0.shape() != (d, d) {
        return Err(CoreError::Argument(format!(
            "dynamics, model noise, and initial covariance must all be {d}x{d}"
        )));
    }
    if h.ncols() != d || gamma.shape() != (k, k) {
        return Err(CoreError::Argument(format!(
            "observation matrix must be {k}x{d} and observation noise {k}x{k}"
        )));
    }
    if j_horizon == 0 {
        return Err(CoreError::Argument(
            "the gain never acts on a window of length zero".into(),
        ));
    }
    Ok(GainDims { d, k })
}

/// Time-averaged error-covariance trace induced by running the filter with
/// the constant gain `kmat` for `j_horizon` steps.
pub fn fixed_gain_objective(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    j_horizon: usize,
    kmat: &DMatrix<f64>,
) -> Result<f64, CoreError> {
    let dims = check_gain_problem(a, h, sigma, gamma, c0, j_horizon)?;
    if kmat.shape() != (dims.d, dims.k) {
        return Err(CoreError::Argument(format!(
            "the gain must be {}x{}, got {}x{}",
            dims.d,
            dims.k,
            kmat.nrows(),
            kmat.ncols()
        )));
    }
    let ikh = DMatrix::identity(dims.d, dims.d) - kmat * h;
    let kgk = kmat * gamma * kmat.transpose();
    let mut c = c0.clone();
    let mut total = c.trace();
    for _ in 0..j_horizon {
        let chat = a * &c * a.transpose() + sigma;
        c = &ikh * chat * ikh.transpose() + &kgk;
        c = (&c + c.transpose()) * 0.5;
        total += c.trace();
    }
    Ok(total / (j_horizon + 1) as f64)
}

fn objective_tape(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    j_horizon: usize,
    kmat: &DMatrix<f64>,
    d: usize,
) -> Result<Tape, CoreError> {
    let inputs = [Value::Matrix(kmat.clone())];
    let tape = record(&inputs, |tb, vars| {
        let kvar = vars[0];
        let a_c = tb.constant(Value::Matrix(a.clone()))?;
        let at_c = tb.constant(Value::Matrix(a.transpose()))?;
        let h_c = tb.constant(Value::Matrix(h.clone()))?;
        let sigma_c = tb.constant(Value::Matrix(sigma.clone()))?;
        let gamma_c = tb.constant(Value::Matrix(gamma.clone()))?;
        let eye = tb.constant(Value::Matrix(DMatrix::<f64>::identity(d, d)))?;

        let kh = tb.matmul(kvar, h_c)?;
        let ikh = tb.sub(eye, kh)?;
        let ikh_t = tb.transpose(ikh)?;
        let kg = tb.matmul(kvar, gamma_c)?;
        let kt = tb.transpose(kvar)?;
        let kgk = tb.matmul(kg, kt)?;

        let mut c = tb.constant(Value::Matrix(c0.clone()))?;
        let mut total = tb.trace(c)?;
        for _ in 0..j_horizon {
            let ac = tb.matmul(a_c, c)?;
            let acat = tb.matmul(ac, at_c)?;
            let chat = tb.add(acat, sigma_c)?;
            let left = tb.matmul(ikh, chat)?;
            let updated = tb.matmul(left, ikh_t)?;
            let full = tb.add(updated, kgk)?;
            c = symmetrize(tb, full)?;
            let tr = tb.trace(c)?;
            total = tb.add(total, tr)?;
        }
        let scaled = tb.smul(total, 1.0 / (j_horizon + 1) as f64)?;
        Ok(vec![scaled])
    })?;
    Ok(tape)
}

fn symmetrize(tb: &mut TapeBuilder, m: Var) -> Result<Var, dakit_autodiff::AdError> {
    let mt = tb.transpose(m)?;
    let sum = tb.add(m, mt)?;
    tb.smul(sum, 0.5)
}

/// Gradient descent on the time-averaged covariance trace over constant
/// gains, with Armijo backtracking.
///
/// Trial gains whose recursion leaves the finite range (or exceeds a large
/// cap) are treated as infinitely bad: the line search rejects them and the
/// fit records that divergence was encountered.
pub fn learn_fixed_gain(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    j_horizon: usize,
    config: &GainConfig,
) -> Result<GainFit, CoreError> {
    let dims = check_gain_problem(a, h, sigma, gamma, c0, j_horizon)?;
    if config.steps == 0 {
        return Err(CoreError::Argument("at least one descent step is required".into()));
    }
    if !(config.step_init > 0.0 && config.step_init.is_finite()) {
        return Err(CoreError::Argument(format!(
            "initial step must be positive and finite, got {}",
            config.step_init
        )));
    }
    let mut kmat = match &config.gain0 {
        Some(k0) => {
            if k0.shape() != (dims.d, dims.k) {
                return Err(CoreError::Argument(format!(
                    "the starting gain must be {}x{}, got {}x{}",
                    dims.d,
                    dims.k,
                    k0.nrows(),
                    k0.ncols()
                )));
            }
            k0.clone()
        }
        None => DMatrix::zeros(dims.d, dims.k),
    };

    let mut tape = objective_tape(a, h, sigma, gamma, c0, j_horizon, &kmat, dims.d)?;
    let mut value = tape.outputs()[0]
        .as_scalar()
        .expect("the objective tape has a scalar output");
    if !(value.is_finite() && value <= DIVERGENCE_CAP) {
        return Err(CoreError::Argument(
            "the covariance recursion diverges at the starting gain".into(),
        ));
    }
    let mut trace = vec![value];
    let mut divergence = false;
    let mut aborted = None;

    for _ in 0..config.steps {
        let grads = tape.gradient(&[Value::Matrix(kmat.clone())])?;
        let g = match &grads[0] {
            Value::Matrix(g) => g.clone(),
            other => panic!("gradient of a matrix input has shape {:?}", other.shape()),
        };
        if g.iter().any(|x| !x.is_finite()) {
            aborted = Some("the objective gradient is not finite".into());
            break;
        }
        let slope = g.norm_squared();
        if slope.sqrt() <= config.grad_tol {
            break;
        }
        let mut alpha = config.step_init;
        let mut accepted = false;
        while alpha >= MIN_STEP {
            let trial = &kmat - &g * alpha;
            let outcome = tape
                .replay(&[Value::Matrix(trial.clone())])
                .ok()
                .and_then(|out| out[0].as_scalar());
            match outcome {
                Some(tv) if tv.is_finite() && tv <= DIVERGENCE_CAP => {
                    if tv <= value - ARMIJO_C * alpha * slope {
                        kmat = trial;
                        value = tv;
                        trace.push(value);
                        accepted = true;
                        break;
                    }
                }
                _ => divergence = true,
            }
            alpha *= 0.5;
        }
        if !accepted {
            aborted = Some("the line search found no acceptable descent step".into());
            break;
        }
    }

    Ok(GainFit {
        gain: kmat,
        objective_trace: trace,
        divergence_encountered: divergence,
        aborted,
    })
}
