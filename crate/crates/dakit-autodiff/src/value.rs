use nalgebra::{DMatrix, DVector};

/// Shape of a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Number of scalar coordinates.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A scalar, vector, or matrix flowing through a tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Scalar(_) => Shape::Scalar,
            Value::Vector(v) => Shape::Vector(v.len()),
            Value::Matrix(m) => Shape::Matrix(m.nrows(), m.ncols()),
        }
    }

    /// Zero value of the given shape.
    pub fn zeros(shape: Shape) -> Value {
        match shape {
            Shape::Scalar => Value::Scalar(0.0),
            Shape::Vector(n) => Value::Vector(DVector::zeros(n)),
            Shape::Matrix(r, c) => Value::Matrix(DMatrix::zeros(r, c)),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(x) => x.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Value::Matrix(m) => Some(m),
            _ => None,
        }
    }

    /// Coordinates in flat order (column-major for matrices, matching nalgebra).
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Value::Scalar(x) => vec![*x],
            Value::Vector(v) => v.iter().copied().collect(),
            Value::Matrix(m) => m.iter().copied().collect(),
        }
    }

    /// Rebuild a value of `shape` from flat coordinates.
    pub fn from_flat(shape: Shape, flat: &[f64]) -> Value {
        assert_eq!(flat.len(), shape.len(), "flat length must match shape");
        match shape {
            Shape::Scalar => Value::Scalar(flat[0]),
            Shape::Vector(n) => Value::Vector(DVector::from_column_slice(&flat[..n])),
            Shape::Matrix(r, c) => Value::Matrix(DMatrix::from_column_slice(r, c, flat)),
        }
    }

    /// Read one flat coordinate.
    pub fn flat_get(&self, i: usize) -> f64 {
        match self {
            Value::Scalar(x) => {
                assert_eq!(i, 0);
                *x
            }
            Value::Vector(v) => v[i],
            Value::Matrix(m) => m[i],
        }
    }

    /// In-place `self += other`, same shape required.
    pub fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            (Value::Vector(a), Value::Vector(b)) => *a += b,
            (Value::Matrix(a), Value::Matrix(b)) => *a += b,
            _ => panic!("add_assign on mismatched shapes"),
        }
    }

    /// Sum of all coordinates.
    pub fn sum(&self) -> f64 {
        match self {
            Value::Scalar(x) => *x,
            Value::Vector(v) => v.sum(),
            Value::Matrix(m) => m.sum(),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Scalar(x)
    }
}

impl From<DVector<f64>> for Value {
    fn from(v: DVector<f64>) -> Self {
        Value::Vector(v)
    }
}

impl From<DMatrix<f64>> for Value {
    fn from(m: DMatrix<f64>) -> Self {
        Value::Matrix(m)
    }
}
