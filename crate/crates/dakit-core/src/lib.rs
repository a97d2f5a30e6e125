//! Building blocks for sequential data assimilation at desk scale.
//!
//! This crate holds the shared vocabulary of the toolkit: Gaussian
//! distributions with validated covariances, state-space models pairing a
//! dynamics map with a noisy observation operator, ensembles of state
//! vectors, deterministic splittable random streams, and synthetic-data
//! generation for twin experiments. Everything downstream (filters,
//! smoothers, parameter learning, multifidelity estimators) speaks these
//! types.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! * ensemble moments use the 1/N normalization; an explicit flag selects
//!   the unbiased 1/(N-1) variant where estimation calls for it;
//! * random draws are addressed, not sequential: a [`RngStream`] names a
//!   point in a tree of ChaCha streams, so member `n` at step `j` draws the
//!   same numbers no matter the thread schedule;
//! * time indexing follows the dynamics convention: states live at
//!   `0..=J`, observations at `1..=J`.

mod ensemble;
mod error;
mod gaussian;
mod io;
mod lorenz;
mod model;
mod rng;
mod series;

pub use ensemble::{ensemble_moments, ensemble_moments_with, Ensemble, Normalization, WeightedEnsemble};
pub use error::CoreError;
pub use gaussian::{gaussian_posterior_linear, gaussian_sample, psd_factor, Gaussian};
pub use io::{
    read_gaussian_json, read_observations_csv, read_trajectory_csv, write_gaussian_json,
    write_observations_csv, write_trajectory_csv,
};
pub use lorenz::{lorenz63_flow, lorenz63_flow_jacobian, Lorenz63};
pub use model::{simulate, Dynamics, ObsMap, StateSpaceModel};
pub use rng::RngStream;
pub use series::{ObservationSeries, Trajectory};
