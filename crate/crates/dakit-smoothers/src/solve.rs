//! Gauss-Newton minimization of the smoothing objective with Levenberg
//! damping.
//!
//! Each iteration linearizes the residuals at the current iterate, forms the
//! damped normal equations, and proposes a full step. Weak mode couples each
//! state only to its neighbors, so the normal matrix is block tridiagonal
//! and is solved by block forward elimination. Strong mode optimizes the
//! initial state alone; the dense `d x d` system comes from chaining
//! tangents along the rollout.

use dakit_core::{CoreError, Trajectory};
use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::problem::{ConstraintMode, FourDVarProblem};

/// Iteration record returned alongside the minimizer, or inside the
/// non-convergence error.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    /// Step proposals evaluated, counting rejected trials.
    pub iterations: usize,
    /// Infinity norm of the objective gradient at the final iterate.
    pub gradient_norm: f64,
    /// Objective at the initial point and after each accepted step.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(
        "no iterate reached the gradient tolerance within {} trials (last gradient norm {:.3e})",
        diagnostics.iterations,
        diagnostics.gradient_norm
    )]
    NonConvergence {
        best: Trajectory,
        diagnostics: SolveDiagnostics,
    },
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_GROW: f64 = 10.0;
const LAMBDA_SHRINK: f64 = 0.1;

struct Linearized {
    gradient_norm: f64,
    // Maps a damping value to the Gauss-Newton step, or None when the
    // damped normal matrix fails to factor.
    step: Box<dyn Fn(f64) -> Option<Vec<DVector<f64>>>>,
}

/// Minimizes the smoothing objective, starting from `init`.
///
/// Convergence means the gradient infinity norm fell to `tol` or below; the
/// minimizer and its diagnostics are returned. Exhausting `max_iter` trial
/// steps yields [`SmootherError::NonConvergence`] carrying the best iterate
/// found.
pub fn fourdvar_solve(
    p: &FourDVarProblem,
    init: &Trajectory,
    tol: f64,
    max_iter: usize,
) -> Result<(Trajectory, SolveDiagnostics), SmootherError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(CoreError::Argument(format!("tolerance must be positive and finite, got {tol}")).into());
    }
    if max_iter == 0 {
        return Err(CoreError::Argument("iteration budget must be at least 1".into()).into());
    }
    p.check_states(init)?;

    let mut states: Vec<DVector<f64>> = init.states().to_vec();
    if p.mode() == ConstraintMode::Strong {
        // Only the head of the trajectory matters; make the iterate honest.
        states = p.strong_value(&states[0]).1;
    }
    let mut objective = value_at(p, &states)?;
    let mut history = vec![objective];
    let mut lambda = LAMBDA_INIT;
    let mut trials = 0;

    loop {
        let lin = linearize(p, &states)?;
        if lin.gradient_norm <= tol {
            let traj = Trajectory::new(states)?;
            return Ok((
                traj,
                SolveDiagnostics {
                    iterations: trials,
                    gradient_norm: lin.gradient_norm,
                    objective_history: history,
                },
            ));
        }
        let mut improved = false;
        while trials < max_iter {
            trials += 1;
            let candidate = (lin.step)(lambda).and_then(|delta| {
                let proposal = apply_step(p, &states, &delta);
                match value_at(p, &proposal) {
                    Ok(value) if value.is_finite() && value < objective => {
                        Some((proposal, value))
                    }
                    _ => None,
                }
            });
            match candidate {
                Some((proposal, value)) => {
                    states = proposal;
                    objective = value;
                    history.push(value);
                    lambda *= LAMBDA_SHRINK;
                    improved = true;
                    break;
                }
                None => lambda *= LAMBDA_GROW,
            }
        }
        if !improved {
            let gradient_norm = linearize(p, &states)?.gradient_norm;
            return Err(SmootherError::NonConvergence {
                best: Trajectory::new(states)?,
                diagnostics: SolveDiagnostics {
                    iterations: trials,
                    gradient_norm,
                    objective_history: history,
                },
            });
        }
    }
}

fn value_at(p: &FourDVarProblem, states: &[DVector<f64>]) -> Result<f64, CoreError> {
    Ok(match p.mode() {
        ConstraintMode::Weak => p.weak_value(states),
        ConstraintMode::Strong => p.strong_value(&states[0]).0,
    })
}

fn apply_step(
    p: &FourDVarProblem,
    states: &[DVector<f64>],
    delta: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    match p.mode() {
        ConstraintMode::Weak => states
            .iter()
            .zip(delta)
            .map(|(s, d)| s + d)
            .collect(),
        ConstraintMode::Strong => p.strong_value(&(&states[0] + &delta[0])).1,
    }
}

fn linearize(p: &FourDVarProblem, states: &[DVector<f64>]) -> Result<Linearized, CoreError> {
    match p.mode() {
        ConstraintMode::Weak => linearize_weak(p, states),
        ConstraintMode::Strong => linearize_strong(p, states),
    }
}

/// Weak-mode normal equations.
///
/// With dynamics Jacobians `A_j` at `v_j` and observation Jacobians `H_j`
/// at `v_{j+1}`, the Gauss-Newton normal matrix has diagonal blocks coupling
/// each state to the penalties it enters and one off-diagonal band from the
/// model-error terms.
fn linearize_weak(p: &FourDVarProblem, states: &[DVector<f64>]) -> Result<Linearized, CoreError> {
    let horizon = p.horizon();
    let d = p.model().dim_state();
    let dynamics = p.model().dynamics();
    let obs_map = p.model().obs_map();
    let sigma_inv = p.sigma_inv().clone();
    let gamma_inv = p.gamma_inv().clone();
    let init_inv = p.init_inv().clone();

    let mut dyn_jac = Vec::with_capacity(horizon);
    let mut obs_jac = Vec::with_capacity(horizon);
    let mut model_residual = Vec::with_capacity(horizon);
    let mut obs_residual = Vec::with_capacity(horizon);
    for j in 0..horizon {
        dyn_jac.push(dynamics.jacobian(&states[j])?);
        obs_jac.push(obs_map.jacobian(&states[j + 1])?);
        model_residual.push(&states[j + 1] - dynamics.apply(&states[j]));
        obs_residual.push(p.obs().obs(j + 1) - obs_map.apply(&states[j + 1]));
    }
    let init_residual = &states[0] - p.model().init().mean();

    // Negative gradient blocks; solving (N + lambda I) delta = -g gives a
    // descent step.
    let mut rhs = vec![DVector::zeros(d); horizon + 1];
    rhs[0] = -(&init_inv * &init_residual);
    for j in 0..horizon {
        let weighted = &sigma_inv * &model_residual[j];
        rhs[j] += dyn_jac[j].transpose() * &weighted;
        rhs[j + 1] -= &weighted;
        rhs[j + 1] += obs_jac[j].transpose() * (&gamma_inv * &obs_residual[j]);
    }

    let mut diag = vec![DMatrix::zeros(d, d); horizon + 1];
    let mut upper = Vec::with_capacity(horizon);
    diag[0] = init_inv;
    for j in 0..horizon {
        let asa = dyn_jac[j].transpose() * &sigma_inv * &dyn_jac[j];
        diag[j] += asa;
        diag[j + 1] += &sigma_inv;
        diag[j + 1] += obs_jac[j].transpose() * &gamma_inv * &obs_jac[j];
        upper.push(-(dyn_jac[j].transpose() * &sigma_inv));
    }

    let gradient_norm = rhs
        .iter()
        .flat_map(|b| b.iter())
        .fold(0.0_f64, |acc, &g| acc.max(g.abs()));

    let step = Box::new(move |lambda: f64| {
        let damped: Vec<DMatrix<f64>> = diag
            .iter()
            .map(|block| block + DMatrix::<f64>::identity(d, d) * lambda)
            .collect();
        solve_block_tridiagonal(&damped, &upper, &rhs)
    });
    Ok(Linearized {
        gradient_norm,
        step,
    })
}

/// Strong-mode normal equations over the initial state.
///
/// Tangents `M_{j+1} = A_j M_j` with `M_0 = I` push initial-state
/// perturbations along the rollout; each observation contributes through
/// `H_j M_{j+1}`.
fn linearize_strong(p: &FourDVarProblem, states: &[DVector<f64>]) -> Result<Linearized, CoreError> {
    let horizon = p.horizon();
    let d = p.model().dim_state();
    let dynamics = p.model().dynamics();
    let obs_map = p.model().obs_map();
    let gamma_inv = p.gamma_inv();
    let init_inv = p.init_inv();

    let init_residual = &states[0] - p.model().init().mean();
    let mut neg_gradient = -(init_inv * &init_residual);
    let mut normal = init_inv.clone();
    let mut tangent = DMatrix::<f64>::identity(d, d);
    for j in 0..horizon {
        tangent = dynamics.jacobian(&states[j])? * tangent;
        let sensitivity = obs_map.jacobian(&states[j + 1])? * &tangent;
        let obs_residual = p.obs().obs(j + 1) - obs_map.apply(&states[j + 1]);
        neg_gradient += sensitivity.transpose() * (gamma_inv * &obs_residual);
        normal += sensitivity.transpose() * gamma_inv * &sensitivity;
    }

    let gradient_norm = neg_gradient
        .iter()
        .fold(0.0_f64, |acc, &g| acc.max(g.abs()));

    let step = Box::new(move |lambda: f64| {
        let damped = &normal + DMatrix::<f64>::identity(d, d) * lambda;
        Cholesky::new(symmetric_part(&damped))
            .map(|chol| vec![chol.solve(&neg_gradient)])
    });
    Ok(Linearized {
        gradient_norm,
        step,
    })
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves a symmetric positive definite block tridiagonal system by block
/// forward elimination and back substitution. `upper[i]` sits between
/// `diag[i]` and `diag[i + 1]`; the subdiagonal is its transpose. Returns
/// None when any pivot fails to factor.
fn solve_block_tridiagonal(
    diag: &[DMatrix<f64>],
    upper: &[DMatrix<f64>],
    rhs: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let n = diag.len();
    let mut pivots: Vec<Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(n);
    let mut eliminated: Vec<DMatrix<f64>> = Vec::with_capacity(n.saturating_sub(1));
    let mut carried: Vec<DVector<f64>> = Vec::with_capacity(n);

    let mut pivot = diag[0].clone();
    let mut carry = rhs[0].clone();
    for i in 0..n {
        let chol = Cholesky::new(symmetric_part(&pivot))?;
        if i + 1 < n {
            let w = chol.solve(&upper[i]);
            pivot = symmetric_part(&(&diag[i + 1] - upper[i].transpose() * &w));
            let next_carry = &rhs[i + 1] - upper[i].transpose() * chol.solve(&carry);
            eliminated.push(w);
            carried.push(carry);
            carry = next_carry;
        } else {
            carried.push(carry.clone());
        }
        pivots.push(chol);
    }

    let mut solution = vec![DVector::zeros(0); n];
    solution[n - 1] = pivots[n - 1].solve(&carried[n - 1]);
    for i in (0..n.saturating_sub(1)).rev() {
        solution[i] = pivots[i].solve(&carried[i]) - &eliminated[i] * &solution[i + 1];
    }
    Some(solution)
}
