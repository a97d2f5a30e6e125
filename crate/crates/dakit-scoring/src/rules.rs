//! The scoring rules.

use dakit_core::{CoreError, Ensemble, Gaussian, Normalization};
use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const INV_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI / 2.0;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

fn require_dim(e_dim: usize, v_dim: usize) -> Result<(), CoreError> {
    if e_dim != v_dim {
        return Err(CoreError::Argument(format!(
            "forecast dimension {e_dim} does not match verification dimension {v_dim}"
        )));
    }
    Ok(())
}

/// Energy score of an ensemble forecast against a verification vector:
///
/// `(1/N) sum_i |u_i - v|^beta  -  (1/2) * pairwise mean of |u_i - u_j|^beta`
///
/// With `Normalization::Unbiased` the pairwise mean runs over distinct pairs
/// and divides by `N(N-1)`; with `Normalization::PerMember` it includes the
/// zero diagonal and divides by `N^2`, which scores the empirical measure
/// itself (for `beta = 2` that reduces exactly to `|mean - v|^2`).
pub fn energy_score(
    ensemble: &Ensemble,
    v: &DVector<f64>,
    beta: f64,
    pairwise: Normalization,
) -> Result<f64, CoreError> {
    require_dim(ensemble.dim(), v.len())?;
    let n = ensemble.len();
    if n < 2 {
        return Err(CoreError::Argument(
            "the energy score pairwise term needs at least two members".into(),
        ));
    }
    if !beta.is_finite() || beta <= 0.0 || beta > 2.0 {
        return Err(CoreError::Argument(format!(
            "energy score exponent must lie in (0, 2], got {beta}"
        )));
    }
    let mut to_v = 0.0;
    for u in ensemble.iter() {
        to_v += gap_pow(u, v, beta);
    }
    to_v /= n as f64;

    let mut pairs = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pairs += gap_pow(ensemble.member(i), ensemble.member(j), beta);
        }
    }
    let pair_mean = match pairwise {
        Normalization::Unbiased => 2.0 * pairs / (n * (n - 1)) as f64,
        Normalization::PerMember => 2.0 * pairs / (n * n) as f64,
    };
    Ok(to_v - 0.5 * pair_mean)
}

fn gap_pow(u: &DVector<f64>, v: &DVector<f64>, beta: f64) -> f64 {
    let sq: f64 = u
        .iter()
        .zip(v.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum();
    if beta == 1.0 {
        sq.sqrt()
    } else if beta == 2.0 {
        sq
    } else {
        sq.powf(0.5 * beta)
    }
}

/// CRPS of a one-dimensional ensemble forecast: the energy score with
/// `beta = 1` and the unbiased pairwise mean.
pub fn crps_ensemble(ensemble: &Ensemble, v: f64) -> Result<f64, CoreError> {
    if ensemble.dim() != 1 {
        return Err(CoreError::Argument(
            "ensemble CRPS is one-dimensional".into(),
        ));
    }
    energy_score(
        ensemble,
        &DVector::from_element(1, v),
        1.0,
        Normalization::Unbiased,
    )
}

/// CRPS of a Gaussian forecast, `sigma` the standard deviation:
///
/// `sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ]`, `z = (v - m)/sigma`.
///
/// Nonnegative for all inputs; the constant `1/sqrt(pi)` is forced by
/// nonnegativity at `v = m`.
pub fn crps_gaussian(m: f64, sigma: f64, v: f64) -> Result<f64, CoreError> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(CoreError::Argument(format!(
            "CRPS needs a positive standard deviation, got {sigma}"
        )));
    }
    let n = std_normal();
    let z = (v - m) / sigma;
    let value = sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - INV_SQRT_PI);
    Ok(value)
}

/// Quantile (pinball) score at level `alpha`:
/// `(1_{v <= q} - alpha) (q - v)` with `q` the forecast alpha-quantile.
///
/// Gaussian forecasts use the closed-form quantile; ensemble forecasts use
/// linear interpolation of the order statistics (the convention where the
/// k-th of N sorted values sits at level `(k-1)/(N-1)`). Weighted ensembles
/// are not supported.
pub fn quantile_score(f: &crate::Forecast, alpha: f64, v: f64) -> Result<f64, CoreError> {
    if !(alpha > 0.0 && alpha < 1.0) || !alpha.is_finite() {
        return Err(CoreError::Argument(format!(
            "quantile level must lie in (0, 1), got {alpha}"
        )));
    }
    if f.dim() != 1 {
        return Err(CoreError::Argument(
            "the quantile score is one-dimensional".into(),
        ));
    }
    let q = match f {
        crate::Forecast::Gaussian(g) => {
            g.mean()[0] + g.cov()[(0, 0)].sqrt() * std_normal().inverse_cdf(alpha)
        }
        crate::Forecast::Ensemble(e) => {
            let mut xs: Vec<f64> = e.iter().map(|u| u[0]).collect();
            xs.sort_unstable_by(f64::total_cmp);
            interpolated_quantile(&xs, alpha)
        }
        crate::Forecast::Weighted(_) => {
            return Err(CoreError::Argument(
                "quantile score supports Gaussian and plain ensemble forecasts".into(),
            ))
        }
    };
    let indicator = if v <= q { 1.0 } else { 0.0 };
    Ok((indicator - alpha) * (q - v))
}

fn interpolated_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * alpha;
    let lo = (h.floor() as usize).min(n - 2);
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Logarithmic score of a Gaussian forecast: `-log density(v)`.
pub fn log_score(f: &Gaussian, v: &DVector<f64>) -> Result<f64, CoreError> {
    require_dim(f.dim(), v.len())?;
    Ok(-f.logpdf(v)?)
}

/// Dawid-Sebastiani score: `(v - m)^T C^{-1} (v - m) + log det C`.
///
/// Sensitive only to the forecast's first two moments; equals
/// `2 * log_score - d * log(2 pi)` for a Gaussian forecast.
pub fn dawid_sebastiani(
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<f64, CoreError> {
    let d = m.len();
    if c.nrows() != d || c.ncols() != d || v.len() != d {
        return Err(CoreError::Argument(format!(
            "inconsistent shapes: mean {d}, covariance {}x{}, verification {}",
            c.nrows(),
            c.ncols(),
            v.len()
        )));
    }
    let chol = Cholesky::new(c.clone()).ok_or_else(|| {
        CoreError::Numeric("forecast covariance is not positive definite".into())
    })?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let r = v - m;
    Ok(r.dot(&chol.solve(&r)) + logdet)
}

/// Folds known verification noise into a Gaussian forecast: scoring the
/// noisy verification against `N(m, C + R)` keeps the rule proper.
pub fn noise_adjusted_forecast(
    f: &Gaussian,
    noise_cov: &DMatrix<f64>,
) -> Result<Gaussian, CoreError> {
    if noise_cov.nrows() != f.dim() || noise_cov.ncols() != f.dim() {
        return Err(CoreError::Argument(format!(
            "noise covariance is {}x{}, forecast dimension is {}",
            noise_cov.nrows(),
            noise_cov.ncols(),
            f.dim()
        )));
    }
    Gaussian::new(f.mean().clone(), f.cov() + noise_cov)
}
