//! Lorenz-63 flow map, its tangent linearization, and a taped recording for
//! gradient-based smoothers.
//!
//! The continuous system is dv/dt = (sigma (v1 - v0), v0 (rho - v2) - v1,
//! v0 v1 - beta v2) with the classical parameters sigma = 10, rho = 28,
//! beta = 8/3. The flow map integrates it with fixed-step RK4 over an
//! interval `tau` that must be an integer multiple of the step `dt`.

use dakit_autodiff::{AdError, TapeBuilder, Var};
use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;

const SIGMA: f64 = 10.0;
const RHO: f64 = 28.0;
const BETA: f64 = 8.0 / 3.0;

/// Relative slack for the `tau / dt` integrality check.
const RATIO_TOL: f64 = 1e-9;

/// RK4 flow map over a window `tau` with step `dt`.
///
/// `tau = 0` is the identity map. The default configuration is the standard
/// twin-experiment setup: `dt = 0.01`, assimilation interval `tau = 0.1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63 {
    tau: f64,
    dt: f64,
    steps: usize,
}

impl Lorenz63 {
    pub fn new(tau: f64, dt: f64) -> Result<Self, CoreError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(CoreError::Argument(format!("step dt = {dt} must be positive")));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(CoreError::Argument(format!("window tau = {tau} must be nonnegative")));
        }
        let ratio = tau / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > RATIO_TOL * steps.max(1.0) {
            return Err(CoreError::Argument(format!(
                "tau/dt = {ratio} is not an integer step count"
            )));
        }
        Ok(Self { tau, dt, steps: steps as usize })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advances `v` through the full window.
    pub fn flow(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), 3, "Lorenz-63 state has dimension 3");
        let mut v = v.clone();
        for _ in 0..self.steps {
            v = rk4_step(&v, self.dt);
        }
        v
    }

    /// Jacobian of [`Lorenz63::flow`] at `v` (tangent-linear model).
    pub fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(v.len(), 3, "Lorenz-63 state has dimension 3");
        let mut v = v.clone();
        let mut jac = DMatrix::identity(3, 3);
        for _ in 0..self.steps {
            jac = rk4_step_jacobian(&v, self.dt) * jac;
            v = rk4_step(&v, self.dt);
        }
        jac
    }

    /// Records the flow on a tape, returning the advanced state variable.
    pub fn record_flow(&self, tb: &mut TapeBuilder, v: Var) -> Result<Var, AdError> {
        let mut v = v;
        for _ in 0..self.steps {
            v = record_rk4_step(tb, v, self.dt)?;
        }
        Ok(v)
    }
}

impl Default for Lorenz63 {
    fn default() -> Self {
        Self::new(0.1, 0.01).expect("default window is ten whole steps")
    }
}

/// One-shot flow map; validates the arguments on every call.
pub fn lorenz63_flow(v: &DVector<f64>, tau: f64, dt: f64) -> Result<DVector<f64>, CoreError> {
    if v.len() != 3 {
        return Err(CoreError::Argument(format!(
            "Lorenz-63 state has dimension 3, got {}",
            v.len()
        )));
    }
    Ok(Lorenz63::new(tau, dt)?.flow(v))
}

/// One-shot flow Jacobian; validates the arguments on every call.
pub fn lorenz63_flow_jacobian(
    v: &DVector<f64>,
    tau: f64,
    dt: f64,
) -> Result<DMatrix<f64>, CoreError> {
    if v.len() != 3 {
        return Err(CoreError::Argument(format!(
            "Lorenz-63 state has dimension 3, got {}",
            v.len()
        )));
    }
    Ok(Lorenz63::new(tau, dt)?.jacobian(v))
}

fn vector_field(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        SIGMA * (v[1] - v[0]),
        v[0] * (RHO - v[2]) - v[1],
        v[0] * v[1] - BETA * v[2],
    ])
}

fn vector_field_jacobian(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[
            -SIGMA, SIGMA, 0.0,
            RHO - v[2], -1.0, -v[0],
            v[1], v[0], -BETA,
        ],
    )
}

fn rk4_step(v: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = vector_field(v);
    let k2 = vector_field(&(v + (dt / 2.0) * &k1));
    let k3 = vector_field(&(v + (dt / 2.0) * &k2));
    let k4 = vector_field(&(v + dt * &k3));
    v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn rk4_step_jacobian(v: &DVector<f64>, dt: f64) -> DMatrix<f64> {
    let eye = DMatrix::<f64>::identity(3, 3);
    let k1 = vector_field(v);
    let v2 = v + (dt / 2.0) * &k1;
    let k2 = vector_field(&v2);
    let v3 = v + (dt / 2.0) * &k2;
    let k3 = vector_field(&v3);
    let v4 = v + dt * &k3;

    let g1 = vector_field_jacobian(v);
    let g2 = vector_field_jacobian(&v2) * (&eye + (dt / 2.0) * &g1);
    let g3 = vector_field_jacobian(&v3) * (&eye + (dt / 2.0) * &g2);
    let g4 = vector_field_jacobian(&v4) * (&eye + dt * &g3);

    &eye + (dt / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
}

fn record_vector_field(tb: &mut TapeBuilder, v: Var) -> Result<Var, AdError> {
    let x = tb.index(v, 0)?;
    let y = tb.index(v, 1)?;
    let z = tb.index(v, 2)?;
    let dy_dx = tb.sub(y, x)?;
    let f0 = tb.smul(dy_dx, SIGMA)?;
    let rho_x = tb.smul(x, RHO)?;
    let xz = tb.mul(x, z)?;
    let f1a = tb.sub(rho_x, xz)?;
    let f1 = tb.sub(f1a, y)?;
    let xy = tb.mul(x, y)?;
    let beta_z = tb.smul(z, BETA)?;
    let f2 = tb.sub(xy, beta_z)?;
    tb.pack_vector(&[f0, f1, f2])
}

fn record_rk4_step(tb: &mut TapeBuilder, v: Var, dt: f64) -> Result<Var, AdError> {
    let k1 = record_vector_field(tb, v)?;
    let h1 = tb.smul(k1, dt / 2.0)?;
    let v2 = tb.add(v, h1)?;
    let k2 = record_vector_field(tb, v2)?;
    let h2 = tb.smul(k2, dt / 2.0)?;
    let v3 = tb.add(v, h2)?;
    let k3 = record_vector_field(tb, v3)?;
    let h3 = tb.smul(k3, dt)?;
    let v4 = tb.add(v, h3)?;
    let k4 = record_vector_field(tb, v4)?;

    let k22 = tb.smul(k2, 2.0)?;
    let k33 = tb.smul(k3, 2.0)?;
    let s1 = tb.add(k1, k22)?;
    let s2 = tb.add(s1, k33)?;
    let s3 = tb.add(s2, k4)?;
    let inc = tb.smul(s3, dt / 6.0)?;
    tb.add(v, inc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_a_fixed_point() {
        let v = DVector::zeros(3);
        let out = lorenz63_flow(&v, 1.0, 0.01).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_window_is_the_identity() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let out = lorenz63_flow(&v, 0.0, 0.01).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn fractional_step_counts_are_rejected() {
        let v = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(lorenz63_flow(&v, 0.015, 0.01).is_err());
        assert!(lorenz63_flow(&v, 0.005, 0.01).is_err());
    }

    #[test]
    fn near_integral_ratios_are_accepted() {
        let tau = 0.1;
        let dt = 0.1 / 3.0;
        assert_eq!(Lorenz63::new(tau, dt).unwrap().steps(), 3);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let map = Lorenz63::new(0.05, 0.01).unwrap();
        let v = DVector::from_vec(vec![1.2, -0.7, 22.0]);
        let jac = map.jacobian(&v);
        let h = 1e-6;
        for col in 0..3 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[col] += h;
            vm[col] -= h;
            let diff = (map.flow(&vp) - map.flow(&vm)) / (2.0 * h);
            for row in 0..3 {
                assert!(
                    (jac[(row, col)] - diff[row]).abs() < 1e-6 * (1.0 + jac[(row, col)].abs()),
                    "entry ({row},{col}): {} vs {}",
                    jac[(row, col)],
                    diff[row]
                );
            }
        }
    }

    #[test]
    fn taped_flow_reproduces_the_direct_flow_and_jacobian() {
        let map = Lorenz63::new(0.03, 0.01).unwrap();
        let v0 = DVector::from_vec(vec![-3.1, 4.0, 17.5]);
        let mut tape = dakit_autodiff::record(
            &[dakit_autodiff::Value::Vector(v0.clone())],
            |tb, inputs| {
                let out = map.record_flow(tb, inputs[0])?;
                Ok(vec![out])
            },
        )
        .unwrap();
        let direct = map.flow(&v0);
        let taped = tape.outputs()[0].as_vector().unwrap().clone();
        assert!((&taped - &direct).amax() < 1e-13);

        let jac_tape = tape
            .forward_jacobian(&[dakit_autodiff::Value::Vector(v0.clone())])
            .unwrap();
        let jac_direct = map.jacobian(&v0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((jac_tape[(i, j)] - jac_direct[(i, j)]).abs() < 1e-11);
            }
        }
    }
}
