//! Time-indexed state and observation sequences.
//!
//! States carry indices `0..=J` (the initial condition plus `J` steps);
//! observations carry indices `1..=J` (none at time zero). Accessors take the
//! time index, not the storage offset.

use nalgebra::DVector;

use crate::error::CoreError;

/// State sequence `v_0, ..., v_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>) -> Result<Self, CoreError> {
        if states.is_empty() {
            return Err(CoreError::Argument("trajectory needs at least the initial state".into()));
        }
        let d = states[0].len();
        if d == 0 {
            return Err(CoreError::Argument("trajectory states must be nonempty vectors".into()));
        }
        for (j, v) in states.iter().enumerate() {
            if v.len() != d {
                return Err(CoreError::Argument(format!(
                    "state {j} has length {}, expected {d}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::Argument(format!("state {j} has non-finite entries")));
            }
        }
        Ok(Self { states })
    }

    /// Number of steps `J`; the sequence holds `J + 1` states.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// State at time `j`, `0 <= j <= J`.
    pub fn state(&self, j: usize) -> &DVector<f64> {
        &self.states[j]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn into_states(self) -> Vec<DVector<f64>> {
        self.states
    }
}

/// Observation sequence `y_1, ..., y_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    obs: Vec<DVector<f64>>,
}

impl ObservationSeries {
    pub fn new(obs: Vec<DVector<f64>>) -> Result<Self, CoreError> {
        if obs.is_empty() {
            return Err(CoreError::Argument("observation series needs at least one entry".into()));
        }
        let k = obs[0].len();
        if k == 0 {
            return Err(CoreError::Argument("observations must be nonempty vectors".into()));
        }
        for (i, y) in obs.iter().enumerate() {
            if y.len() != k {
                return Err(CoreError::Argument(format!(
                    "observation {} has length {}, expected {k}",
                    i + 1,
                    y.len()
                )));
            }
            if y.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::Argument(format!(
                    "observation {} has non-finite entries",
                    i + 1
                )));
            }
        }
        Ok(Self { obs })
    }

    /// Number of observations `J`.
    pub fn horizon(&self) -> usize {
        self.obs.len()
    }

    pub fn dim(&self) -> usize {
        self.obs[0].len()
    }

    /// Observation at time `j`, `1 <= j <= J`.
    pub fn obs(&self, j: usize) -> &DVector<f64> {
        assert!(
            (1..=self.horizon()).contains(&j),
            "observation indices run 1..=J, got {j}"
        );
        &self.obs[j - 1]
    }

    /// All observations in time order; slice position `i` holds `y_{i+1}`.
    pub fn all(&self) -> &[DVector<f64>] {
        &self.obs
    }

    pub fn into_inner(self) -> Vec<DVector<f64>> {
        self.obs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_counts_steps_not_states() {
        let t = Trajectory::new(vec![DVector::zeros(2); 5]).unwrap();
        assert_eq!(t.horizon(), 4);
        let o = ObservationSeries::new(vec![DVector::zeros(1); 4]).unwrap();
        assert_eq!(o.horizon(), 4);
    }

    #[test]
    fn observations_are_one_indexed() {
        let o = ObservationSeries::new(vec![
            DVector::from_vec(vec![10.0]),
            DVector::from_vec(vec![20.0]),
        ])
        .unwrap();
        assert_eq!(o.obs(1)[0], 10.0);
        assert_eq!(o.obs(2)[0], 20.0);
    }

    #[test]
    #[should_panic(expected = "observation indices run 1..=J")]
    fn observation_index_zero_panics() {
        let o = ObservationSeries::new(vec![DVector::zeros(1)]).unwrap();
        let _ = o.obs(0);
    }

    #[test]
    fn empty_sequences_are_rejected() {
        assert!(Trajectory::new(vec![]).is_err());
        assert!(ObservationSeries::new(vec![]).is_err());
    }
}
