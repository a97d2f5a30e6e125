//! Sequential state estimation for stochastic dynamics observed through
//! noise.
//!
//! Three families of one-step updates, all sharing the predict-then-correct
//! pattern:
//!
//! * exact second-order recursions for linear maps ([`kalman_step`],
//!   [`steady_state_gain`]) and their fixed-gain ([`threedvar_step`]) and
//!   linearized ([`exkf_step`]) extensions,
//! * the perturbed-observation ensemble update [`enkf_step`] with
//!   multiplicative inflation and distance-based covariance tapering,
//! * sequential importance sampling with adaptive resampling, using either
//!   the dynamics proposal ([`bpf_step`]) or the observation-aware optimal
//!   proposal ([`opf_step`]).
//!
//! Every step consumes and returns immutable state, and all randomness is
//! addressed through counter-based streams, so repeated calls reproduce bit
//! for bit.

mod enkf;
mod kalman;
mod particle;

pub use enkf::{enkf_step, inflate, localize_cov, EnKFConfig, Localization, ObsDistances};
pub use kalman::{exkf_step, kalman_step, steady_state_gain, threedvar_step, KalmanState};
pub use particle::{bpf_step, opf_step, resample, ResampleScheme};
