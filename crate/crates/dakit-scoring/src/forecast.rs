//! Forecast representations and score reporting.

use dakit_core::{ensemble_moments, CoreError, Ensemble, Gaussian, WeightedEnsemble};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// A probabilistic forecast in one of three representations.
#[derive(Debug, Clone)]
pub enum Forecast {
    Gaussian(Gaussian),
    Ensemble(Ensemble),
    Weighted(WeightedEnsemble),
}

impl Forecast {
    pub fn dim(&self) -> usize {
        match self {
            Forecast::Gaussian(g) => g.dim(),
            Forecast::Ensemble(e) => e.dim(),
            Forecast::Weighted(w) => w.ensemble().dim(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            Forecast::Gaussian(g) => g.mean().clone(),
            Forecast::Ensemble(e) => ensemble_moments(e).0,
            Forecast::Weighted(w) => w.moments().0,
        }
    }

    /// Total variance `E|v - m|^2`, the covariance trace. Ensemble variants
    /// use the per-member normalization, matching the empirical measure.
    pub fn total_variance(&self) -> f64 {
        match self {
            Forecast::Gaussian(g) => g.cov().trace(),
            Forecast::Ensemble(e) => ensemble_moments(e).1.trace(),
            Forecast::Weighted(w) => w.moments().1.trace(),
        }
    }
}

/// Scores of one rule over a sequence of verifications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    rule: String,
    scores: Vec<f64>,
    mean: f64,
}

impl ScoreReport {
    /// The mean is always the arithmetic mean of `scores`.
    pub fn new(rule: impl Into<String>, scores: Vec<f64>) -> Result<Self, CoreError> {
        if scores.is_empty() {
            return Err(CoreError::Argument(
                "a score report needs at least one score".into(),
            ));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(Self {
            rule: rule.into(),
            scores,
            mean,
        })
    }

    pub fn rule(&self) -> &str {
        &self.rule
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }
}
