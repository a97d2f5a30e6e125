//! Trajectory MAP estimation over an assimilation window.
//!
//! The posterior over a state sequence factors into a Gaussian initial
//! penalty, per-step model-error penalties, and per-step data misfits; its
//! negative logarithm is a sum of quadratic forms. The weak-constraint
//! problem minimizes over the whole sequence, the strong-constraint variant
//! pins each state to the deterministic rollout and minimizes over the
//! initial condition alone.
//!
//! Minimization runs Gauss-Newton on the stacked residuals with Levenberg
//! damping; the weak-mode normal equations are block tridiagonal in the
//! time index and are solved by block elimination.

mod problem;
mod solve;

pub use problem::{fourdvar_objective, ConstraintMode, FourDVarProblem};
pub use solve::{fourdvar_solve, SmootherError, SolveDiagnostics};
