//! Closed-form divergences between Gaussians.

use dakit_core::{CoreError, Gaussian};
use nalgebra::{Cholesky, DMatrix, Dyn};

fn chol(cov: &DMatrix<f64>, label: &str) -> Result<Cholesky<f64, Dyn>, CoreError> {
    Cholesky::new(cov.clone()).ok_or_else(|| {
        CoreError::Numeric(format!(
            "{label} covariance is not positive definite; closed-form divergences need full rank"
        ))
    })
}

fn logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

fn require_same_dim(p: &Gaussian, q: &Gaussian) -> Result<(), CoreError> {
    if p.dim() != q.dim() {
        return Err(CoreError::Argument(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Kullback-Leibler divergence `KL(p || q)`; directional, `q` is the reference.
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64, CoreError> {
    require_same_dim(p, q)?;
    let d = p.dim() as f64;
    let cq = chol(q.cov(), "reference")?;
    let cp = chol(p.cov(), "first")?;
    let trace = cq.solve(p.cov()).trace();
    let dm = q.mean() - p.mean();
    let quad = dm.dot(&cq.solve(&dm));
    Ok(0.5 * (trace + quad - d + logdet(&cq) - logdet(&cp)))
}

/// Chi-squared divergence `chi2(p || q) = integral p^2/q - 1`.
///
/// Finite only when `2 cov_q - cov_p` is positive definite; otherwise the
/// integral diverges and a `Domain` error is returned. The value is clamped
/// at zero, where it lands exactly for identical inputs.
pub fn chi2_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64, CoreError> {
    require_same_dim(p, q)?;
    let m = q.cov() * 2.0 - p.cov();
    let cm = Cholesky::new(m).ok_or_else(|| {
        CoreError::Domain(
            "chi-squared integral diverges: 2*cov_q - cov_p is not positive definite".into(),
        )
    })?;
    let cq = chol(q.cov(), "reference")?;
    let cp = chol(p.cov(), "first")?;
    let dm = p.mean() - q.mean();
    let quad = dm.dot(&cm.solve(&dm));
    let log_value = logdet(&cq) - 0.5 * logdet(&cp) - 0.5 * logdet(&cm) + quad;
    Ok((log_value.exp() - 1.0).max(0.0))
}
