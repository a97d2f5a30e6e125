//! Proper scoring rules for probabilistic forecasts, plus the spread-error
//! ratio diagnostic.
//!
//! A score measures one forecast against one verification value; smaller is
//! better. All rules here are proper: in expectation over verifications drawn
//! from the true distribution, no forecast beats the truth itself. The rules
//! differ in what they are sensitive to. The energy score and CRPS compare
//! the whole distribution, the logarithmic score evaluates the density at the
//! verification, and the Dawid-Sebastiani score controls only the first two
//! moments.

mod diagnostics;
mod forecast;
mod rules;

pub use diagnostics::spread_error_ratio;
pub use forecast::{Forecast, ScoreReport};
pub use rules::{
    crps_ensemble, crps_gaussian, dawid_sebastiani, energy_score, log_score,
    noise_adjusted_forecast, quantile_score,
};
