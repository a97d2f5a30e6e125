use nalgebra::DVector;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar with a vector of tangents, one per seed direction.
///
/// Arithmetic on `Dual` carries first derivatives alongside values, which
/// gives forward-mode derivatives of plain Rust closures without a tape.
/// All operands in an expression must carry the same number of directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub tangent: DVector<f64>,
}

impl Dual {
    pub fn new(value: f64, tangent: DVector<f64>) -> Self {
        Dual { value, tangent }
    }

    /// Constant with respect to all `n` seed directions.
    pub fn constant(value: f64, n: usize) -> Self {
        Dual {
            value,
            tangent: DVector::zeros(n),
        }
    }

    /// The `k`-th of `n` input variables: unit tangent in direction `k`.
    pub fn variable(value: f64, k: usize, n: usize) -> Self {
        let mut t = DVector::zeros(n);
        t[k] = 1.0;
        Dual { value, tangent: t }
    }

    pub fn sin(&self) -> Dual {
        Dual::new(self.value.sin(), &self.tangent * self.value.cos())
    }

    pub fn cos(&self) -> Dual {
        Dual::new(self.value.cos(), &self.tangent * -self.value.sin())
    }

    pub fn exp(&self) -> Dual {
        let e = self.value.exp();
        Dual::new(e, &self.tangent * e)
    }

    pub fn ln(&self) -> Dual {
        Dual::new(self.value.ln(), &self.tangent / self.value)
    }

    pub fn sqrt(&self) -> Dual {
        let s = self.value.sqrt();
        Dual::new(s, &self.tangent / (2.0 * s))
    }

    pub fn powf(&self, p: f64) -> Dual {
        Dual::new(
            self.value.powf(p),
            &self.tangent * (p * self.value.powf(p - 1.0)),
        )
    }
}

impl Add for &Dual {
    type Output = Dual;
    fn add(self, rhs: &Dual) -> Dual {
        Dual::new(self.value + rhs.value, &self.tangent + &rhs.tangent)
    }
}

impl Sub for &Dual {
    type Output = Dual;
    fn sub(self, rhs: &Dual) -> Dual {
        Dual::new(self.value - rhs.value, &self.tangent - &rhs.tangent)
    }
}

impl Mul for &Dual {
    type Output = Dual;
    fn mul(self, rhs: &Dual) -> Dual {
        Dual::new(
            self.value * rhs.value,
            &self.tangent * rhs.value + &rhs.tangent * self.value,
        )
    }
}

impl Div for &Dual {
    type Output = Dual;
    fn div(self, rhs: &Dual) -> Dual {
        let q = self.value / rhs.value;
        Dual::new(
            q,
            (&self.tangent - &rhs.tangent * q) / rhs.value,
        )
    }
}

impl Neg for &Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.value, -&self.tangent)
    }
}

macro_rules! owned_ops {
    ($($trait:ident :: $m:ident),*) => {$(
        impl $trait for Dual {
            type Output = Dual;
            fn $m(self, rhs: Dual) -> Dual {
                $trait::$m(&self, &rhs)
            }
        }
    )*};
}
owned_ops!(Add::add, Sub::sub, Mul::mul, Div::div);

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        -&self
    }
}
