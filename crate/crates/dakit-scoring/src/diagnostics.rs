//! Calibration diagnostics for forecast sequences.

use crate::Forecast;
use dakit_core::{CoreError, Trajectory};

/// Ratio of mean forecast spread to mean squared error over a verification
/// trajectory.
///
/// Forecast `j` (zero-based) is checked against the state the trajectory
/// reaches after `j + 1` steps, so the slice length must equal the
/// trajectory's horizon. Spread is the trace of the forecast covariance.
/// A ratio near one indicates the ensemble spread is consistent with the
/// actual errors; well below one indicates overconfidence.
///
/// Returns `Domain` when every forecast mean hits the truth exactly, since
/// the ratio is then unbounded.
pub fn spread_error_ratio(forecasts: &[Forecast], truth: &Trajectory) -> Result<f64, CoreError> {
    if forecasts.is_empty() {
        return Err(CoreError::Argument(
            "spread-error ratio needs at least one forecast".into(),
        ));
    }
    if forecasts.len() != truth.horizon() {
        return Err(CoreError::Argument(format!(
            "got {} forecasts for a trajectory with horizon {}",
            forecasts.len(),
            truth.horizon()
        )));
    }
    let mut spread_sum = 0.0;
    let mut err_sum = 0.0;
    for (j, f) in forecasts.iter().enumerate() {
        let v = truth.state(j + 1);
        if f.dim() != v.len() {
            return Err(CoreError::Argument(format!(
                "forecast {} has dimension {}, trajectory has dimension {}",
                j,
                f.dim(),
                v.len()
            )));
        }
        spread_sum += f.total_variance();
        err_sum += (v - f.mean()).norm_squared();
    }
    if err_sum == 0.0 {
        return Err(CoreError::Domain(
            "mean squared error is zero, the spread-error ratio diverges".into(),
        ));
    }
    Ok(spread_sum / err_sum)
}
