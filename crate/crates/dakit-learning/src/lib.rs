//! Parameter estimation for state-space models.
//!
//! Four complementary routes to fitting a model against an observation
//! window:
//!
//! - expectation-maximization over the noise covariances, with an exact
//!   joint-Gaussian smoother for linear models and sampled residuals
//!   otherwise ([`em_update_covariances`], [`exact_smoother_samples`],
//!   [`mc_em_run`]);
//! - direct maximum likelihood through the filter recursion, differentiated
//!   in reverse ([`kf_loglik`], [`fit_mle_autodiff_kf`]);
//! - regression of unexplained one-step increments onto state features
//!   ([`learn_increment_correction`]);
//! - descent on the error covariance a constant filter gain induces
//!   ([`learn_fixed_gain`]).
//!
//! Covariance parameters travel in log-Cholesky coordinates
//! ([`ParamVector`]), which keep every iterate positive definite without
//! constraints.

mod em;
mod gain;
mod increment;
mod likelihood;
mod mcem;
mod params;
mod sampling;

pub use em::{em_update_covariances, em_update_covariances_exact};
pub use gain::{fixed_gain_objective, learn_fixed_gain, GainConfig, GainFit};
pub use increment::{learn_increment_correction, FeatureBasis};
pub use likelihood::{
    decode_covariance, fit_mle_autodiff_kf, kf_loglik, KfFamily, KfParts, MleConfig, MleFit,
};
pub use mcem::{mc_em_run, DynamicsFamily, McEmConfig, McEmTrace, ParameterizedModel};
pub use params::{
    log_cholesky_decode, log_cholesky_encode, triangle_len, ParamLayout, ParamVector,
};
pub use sampling::{
    exact_smoother_samples, smoother_posterior, SmootherSampleSet, MAX_STACKED_DIM,
};
