//! Distances and divergences between probability distributions.
//!
//! Three families of estimators, by how the distributions are represented:
//!
//! * [`GridDensity`] holds a density tabulated on a uniform 1-d grid; total
//!   variation, Hellinger, and quantile-based Wasserstein distances are
//!   computed by midpoint quadrature on it.
//! * Gaussian closed forms ([`kl_gaussian`], [`chi2_gaussian`]) evaluate the
//!   divergences exactly from means and covariances.
//! * Ensemble estimators ([`mmd_sq_ensemble`], [`energy_dist_sq_ensemble`],
//!   [`wasserstein1_empirical_1d`]) work directly on samples.
//!
//! All distances are symmetric in their arguments except the divergences
//! (KL, chi-squared), which are directional: the first argument is the
//! distribution being measured, the second the reference.

mod ensemble;
mod gaussian;
mod grid;

pub use ensemble::{
    energy_dist_sq_ensemble, mmd_sq_ensemble, read_sample_set_csv, wasserstein1_empirical_1d,
    write_sample_set_csv, Kernel,
};
pub use gaussian::{chi2_gaussian, kl_gaussian};
pub use grid::{hellinger_grid, tv_grid, wasserstein_p_quantile, GridDensity};
