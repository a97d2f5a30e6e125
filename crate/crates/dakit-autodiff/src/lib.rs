//! Tape-based automatic differentiation for straight-line numerical programs.
//!
//! A program is recorded once against a [`TapeBuilder`], which evaluates it
//! eagerly and stores one node per primitive operation in topological order.
//! The resulting [`Tape`] can be replayed at new inputs and differentiated in
//! both directions:
//!
//! * forward mode propagates tangents input-to-output, one sweep per input
//!   coordinate ([`Tape::forward_jacobian`]);
//! * reverse mode propagates adjoints output-to-input, one sweep per output
//!   coordinate ([`Tape::reverse_gradient`]).
//!
//! Values are scalars, vectors, or matrices. Matrix factorizations appear as
//! first-class primitives (`cholesky_solve`, `logdet`) with analytic
//! derivative rules, so programs like a Kalman-filter log-likelihood
//! differentiate without unrolling the linear algebra into scalar graphs.
//!
//! Control flow is the host language's: whatever branches were taken during
//! recording are frozen into the tape. Replays reuse that fixed structure.

mod dual;
mod tape;
mod value;

pub use dual::Dual;
pub use tape::{record, SweepCounters, Tape, TapeBuilder, Var, PRIMITIVES};
pub use value::{Shape, Value};

/// Failure modes for recording, replaying, and differentiating tapes.
#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {expected}, got {got:?}")]
    BadOperand {
        op: &'static str,
        expected: &'static str,
        got: Shape,
    },
    #[error("unregistered primitive `{0}`")]
    UnregisteredPrimitive(String),
    #[error("input {index}: shape {got:?} does not match recorded shape {expected:?}")]
    InputShape {
        index: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("expected {expected} inputs, got {got}")]
    InputArity { expected: usize, got: usize },
    #[error("node {node} ({op}): produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {node} ({op}): matrix is not positive definite")]
    NotPositiveDefinite { node: usize, op: &'static str },
    #[error("tape has no outputs")]
    NoOutputs,
}
