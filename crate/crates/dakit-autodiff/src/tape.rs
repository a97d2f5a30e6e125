use nalgebra::{DMatrix, DVector, Dyn};

use crate::value::{Shape, Value};
use crate::AdError;

type Chol = nalgebra::linalg::Cholesky<f64, Dyn>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Names of the registered differentiable primitives.
///
/// Structural helpers (packing, indexing, transpose, trace, sum) are shape
/// plumbing with identity-like derivative rules and are not part of this
/// registry.
pub const PRIMITIVES: [&str; 16] = [
    "add", "sub", "mul", "div", "neg", "sin", "cos", "exp", "log", "pow", "sqrt", "dot", "matvec",
    "matmul", "cholesky_solve", "logdet",
];

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Pow(Var, f64),
    Dot(Var, Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    CholSolve(Var, Var),
    LogDet(Var),
    Transpose(Var),
    Trace(Var),
    Sum(Var),
    PackVector(Vec<Var>),
    PackMatrix(usize, usize, Vec<Var>),
    Index(Var, usize),
    Elem(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Pow(..) => "pow",
            Op::Dot(..) => "dot",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::CholSolve(..) => "cholesky_solve",
            Op::LogDet(_) => "logdet",
            Op::Transpose(_) => "transpose",
            Op::Trace(_) => "trace",
            Op::Sum(_) => "sum",
            Op::PackVector(_) => "pack_vector",
            Op::PackMatrix(..) => "pack_matrix",
            Op::Index(..) => "index",
            Op::Elem(..) => "elem",
        }
    }
}

struct Node {
    op: Op,
    value: Value,
    /// Cholesky factor cached by `cholesky_solve` and `logdet` for reuse in
    /// derivative sweeps; refreshed on replay.
    chol: Option<Chol>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("op", &self.op)
            .field("value", &self.value)
            .finish()
    }
}

/// Records primitive applications and evaluates them eagerly.
pub struct TapeBuilder {
    nodes: Vec<Node>,
}

/// A recorded straight-line program with cached intermediate values.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
    input_shapes: Vec<Shape>,
    outputs: Vec<Var>,
    fwd_visits: u64,
    rev_visits: u64,
}

/// Cumulative node-visit counts for the two sweep directions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepCounters {
    pub forward_node_visits: u64,
    pub reverse_node_visits: u64,
}

/// Record `f` as a tape, evaluating it at `inputs`.
///
/// `f` receives one [`Var`] per input and must build its outputs from the
/// registered primitives. Shapes are fixed at record time; replays must
/// supply inputs of identical shapes.
pub fn record<F>(inputs: &[Value], f: F) -> Result<Tape, AdError>
where
    F: FnOnce(&mut TapeBuilder, &[Var]) -> Result<Vec<Var>, AdError>,
{
    let mut tb = TapeBuilder { nodes: Vec::new() };
    let mut vars = Vec::with_capacity(inputs.len());
    for (slot, v) in inputs.iter().enumerate() {
        vars.push(tb.push(Op::Input(slot), v.clone(), None)?);
    }
    let outputs = f(&mut tb, &vars)?;
    if outputs.is_empty() {
        return Err(AdError::NoOutputs);
    }
    Ok(Tape {
        input_shapes: inputs.iter().map(Value::shape).collect(),
        inputs: vars,
        nodes: tb.nodes,
        outputs,
        fwd_visits: 0,
        rev_visits: 0,
    })
}

impl TapeBuilder {
    fn push(&mut self, op: Op, value: Value, chol: Option<Chol>) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value, chol });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.val(v).shape()
    }

    /// Embed a constant; constants keep their recorded value across replays.
    pub fn constant(&mut self, value: impl Into<Value>) -> Result<Var, AdError> {
        self.push(Op::Const, value.into(), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_map("add", self.val(a), self.val(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_map("sub", self.val(a), self.val(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, None)
    }

    /// Elementwise product; either side may be a scalar, which broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_map("mul", self.val(a), self.val(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_map("div", self.val(a), self.val(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), v, None)
    }

    /// Multiply by a compile-time scalar constant.
    pub fn smul(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let cv = self.constant(c)?;
        self.mul(cv, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("neg", self.val(a), |x| -x);
        self.push(Op::Neg(a), v, None)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("sin", self.val(a), f64::sin);
        self.push(Op::Sin(a), v, None)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("cos", self.val(a), f64::cos);
        self.push(Op::Cos(a), v, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("exp", self.val(a), f64::exp);
        self.push(Op::Exp(a), v, None)
    }

    /// Natural logarithm, elementwise.
    pub fn ln(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("log", self.val(a), f64::ln);
        self.push(Op::Ln(a), v, None)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        let v = map("sqrt", self.val(a), f64::sqrt);
        self.push(Op::Sqrt(a), v, None)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, AdError> {
        let v = map("pow", self.val(a), |x| x.powf(p));
        self.push(Op::Pow(a, p), v, None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        match (self.val(a), self.val(b)) {
            (Value::Vector(x), Value::Vector(y)) if x.len() == y.len() => {
                let v = Value::Scalar(x.dot(y));
                self.push(Op::Dot(a, b), v, None)
            }
            (x, y) => Err(AdError::ShapeMismatch {
                op: "dot",
                lhs: x.shape(),
                rhs: y.shape(),
            }),
        }
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, AdError> {
        match (self.val(m), self.val(x)) {
            (Value::Matrix(a), Value::Vector(v)) if a.ncols() == v.len() => {
                let y = Value::Vector(a * v);
                self.push(Op::MatVec(m, x), y, None)
            }
            (a, v) => Err(AdError::ShapeMismatch {
                op: "matvec",
                lhs: a.shape(),
                rhs: v.shape(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        match (self.val(a), self.val(b)) {
            (Value::Matrix(x), Value::Matrix(y)) if x.ncols() == y.nrows() => {
                let v = Value::Matrix(x * y);
                self.push(Op::MatMul(a, b), v, None)
            }
            (x, y) => Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape(),
                rhs: y.shape(),
            }),
        }
    }

    /// Solve `A x = b` for symmetric positive definite `A`; `b` may be a
    /// vector or a matrix of stacked right-hand sides.
    pub fn cholesky_solve(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let node = self.nodes.len();
        let (value, chol) = eval_chol_solve(node, self.val(a), self.val(b))?;
        self.push(Op::CholSolve(a, b), value, Some(chol))
    }

    /// Log-determinant of a symmetric positive definite matrix.
    pub fn logdet(&mut self, a: Var) -> Result<Var, AdError> {
        let node = self.nodes.len();
        let (value, chol) = eval_logdet(node, self.val(a))?;
        self.push(Op::LogDet(a), value, Some(chol))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        match self.val(a) {
            Value::Matrix(m) => {
                let v = Value::Matrix(m.transpose());
                self.push(Op::Transpose(a), v, None)
            }
            other => Err(AdError::BadOperand {
                op: "transpose",
                expected: "matrix",
                got: other.shape(),
            }),
        }
    }

    pub fn trace(&mut self, a: Var) -> Result<Var, AdError> {
        match self.val(a) {
            Value::Matrix(m) if m.is_square() => {
                let v = Value::Scalar(m.trace());
                self.push(Op::Trace(a), v, None)
            }
            other => Err(AdError::BadOperand {
                op: "trace",
                expected: "square matrix",
                got: other.shape(),
            }),
        }
    }

    /// Sum of all coordinates.
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let v = Value::Scalar(self.val(a).sum());
        self.push(Op::Sum(a), v, None)
    }

    /// Assemble a vector from scalar entries.
    pub fn pack_vector(&mut self, entries: &[Var]) -> Result<Var, AdError> {
        let mut data = Vec::with_capacity(entries.len());
        for &e in entries {
            match self.val(e) {
                Value::Scalar(x) => data.push(*x),
                other => {
                    return Err(AdError::BadOperand {
                        op: "pack_vector",
                        expected: "scalar entries",
                        got: other.shape(),
                    })
                }
            }
        }
        let v = Value::Vector(DVector::from_vec(data));
        self.push(Op::PackVector(entries.to_vec()), v, None)
    }

    /// Assemble an `r x c` matrix from scalar entries in row-major order.
    pub fn pack_matrix(&mut self, r: usize, c: usize, entries: &[Var]) -> Result<Var, AdError> {
        if entries.len() != r * c {
            return Err(AdError::InputArity {
                expected: r * c,
                got: entries.len(),
            });
        }
        let mut data = Vec::with_capacity(entries.len());
        for &e in entries {
            match self.val(e) {
                Value::Scalar(x) => data.push(*x),
                other => {
                    return Err(AdError::BadOperand {
                        op: "pack_matrix",
                        expected: "scalar entries",
                        got: other.shape(),
                    })
                }
            }
        }
        let v = Value::Matrix(DMatrix::from_row_slice(r, c, &data));
        self.push(Op::PackMatrix(r, c, entries.to_vec()), v, None)
    }

    /// Extract coordinate `i` of a vector.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, AdError> {
        match self.val(a) {
            Value::Vector(v) if i < v.len() => {
                let x = Value::Scalar(v[i]);
                self.push(Op::Index(a, i), x, None)
            }
            other => Err(AdError::BadOperand {
                op: "index",
                expected: "vector with enough entries",
                got: other.shape(),
            }),
        }
    }

    /// Extract entry `(i, j)` of a matrix.
    pub fn elem(&mut self, a: Var, i: usize, j: usize) -> Result<Var, AdError> {
        match self.val(a) {
            Value::Matrix(m) if i < m.nrows() && j < m.ncols() => {
                let x = Value::Scalar(m[(i, j)]);
                self.push(Op::Elem(a, i, j), x, None)
            }
            other => Err(AdError::BadOperand {
                op: "elem",
                expected: "matrix with enough entries",
                got: other.shape(),
            }),
        }
    }

    /// Apply a primitive by registry name. `aux` carries the constant
    /// exponent for `pow`. Unknown names are a construction error.
    pub fn apply_named(
        &mut self,
        name: &str,
        args: &[Var],
        aux: Option<f64>,
    ) -> Result<Var, AdError> {
        let arity_err = |expected: usize, got: usize| AdError::InputArity { expected, got };
        let one = |args: &[Var]| -> Result<Var, AdError> {
            if args.len() == 1 {
                Ok(args[0])
            } else {
                Err(arity_err(1, args.len()))
            }
        };
        let two = |args: &[Var]| -> Result<(Var, Var), AdError> {
            if args.len() == 2 {
                Ok((args[0], args[1]))
            } else {
                Err(arity_err(2, args.len()))
            }
        };
        match name {
            "add" => two(args).and_then(|(a, b)| self.add(a, b)),
            "sub" => two(args).and_then(|(a, b)| self.sub(a, b)),
            "mul" => two(args).and_then(|(a, b)| self.mul(a, b)),
            "div" => two(args).and_then(|(a, b)| self.div(a, b)),
            "neg" => one(args).and_then(|a| self.neg(a)),
            "sin" => one(args).and_then(|a| self.sin(a)),
            "cos" => one(args).and_then(|a| self.cos(a)),
            "exp" => one(args).and_then(|a| self.exp(a)),
            "log" => one(args).and_then(|a| self.ln(a)),
            "sqrt" => one(args).and_then(|a| self.sqrt(a)),
            "pow" => {
                let a = one(args)?;
                let p = aux.ok_or(AdError::InputArity {
                    expected: 2,
                    got: 1,
                })?;
                self.pow(a, p)
            }
            "dot" => two(args).and_then(|(a, b)| self.dot(a, b)),
            "matvec" => two(args).and_then(|(a, b)| self.matvec(a, b)),
            "matmul" => two(args).and_then(|(a, b)| self.matmul(a, b)),
            "cholesky_solve" => two(args).and_then(|(a, b)| self.cholesky_solve(a, b)),
            "logdet" => one(args).and_then(|a| self.logdet(a)),
            other => Err(AdError::UnregisteredPrimitive(other.to_string())),
        }
    }
}

fn map(_op: &'static str, a: &Value, f: impl Fn(f64) -> f64) -> Value {
    match a {
        Value::Scalar(x) => Value::Scalar(f(*x)),
        Value::Vector(v) => Value::Vector(v.map(&f)),
        Value::Matrix(m) => Value::Matrix(m.map(&f)),
    }
}

fn zip_map(
    op: &'static str,
    a: &Value,
    b: &Value,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Value, AdError> {
    Ok(match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(f(*x, *y)),
        (Value::Scalar(x), Value::Vector(v)) => Value::Vector(v.map(|y| f(*x, y))),
        (Value::Scalar(x), Value::Matrix(m)) => Value::Matrix(m.map(|y| f(*x, y))),
        (Value::Vector(v), Value::Scalar(y)) => Value::Vector(v.map(|x| f(x, *y))),
        (Value::Matrix(m), Value::Scalar(y)) => Value::Matrix(m.map(|x| f(x, *y))),
        (Value::Vector(x), Value::Vector(y)) if x.len() == y.len() => {
            Value::Vector(x.zip_map(y, f))
        }
        (Value::Matrix(x), Value::Matrix(y)) if x.shape() == y.shape() => {
            Value::Matrix(x.zip_map(y, f))
        }
        _ => {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            })
        }
    })
}

/// Collapse `v` back to `shape` by summation; used when a broadcast scalar
/// operand receives adjoint contributions from a tensor result.
fn reduce_to(shape: Shape, v: Value) -> Value {
    if v.shape() == shape {
        v
    } else {
        debug_assert_eq!(shape, Shape::Scalar);
        Value::Scalar(v.sum())
    }
}

fn eval_chol_solve(node: usize, a: &Value, b: &Value) -> Result<(Value, Chol), AdError> {
    let m = match a {
        Value::Matrix(m) if m.is_square() => m,
        other => {
            return Err(AdError::BadOperand {
                op: "cholesky_solve",
                expected: "square matrix",
                got: other.shape(),
            })
        }
    };
    let chol = nalgebra::linalg::Cholesky::new(m.clone()).ok_or(AdError::NotPositiveDefinite {
        node,
        op: "cholesky_solve",
    })?;
    let value = match b {
        Value::Vector(v) if v.len() == m.nrows() => Value::Vector(chol.solve(v)),
        Value::Matrix(rhs) if rhs.nrows() == m.nrows() => Value::Matrix(chol.solve(rhs)),
        other => {
            return Err(AdError::ShapeMismatch {
                op: "cholesky_solve",
                lhs: a.shape(),
                rhs: other.shape(),
            })
        }
    };
    Ok((value, chol))
}

fn eval_logdet(node: usize, a: &Value) -> Result<(Value, Chol), AdError> {
    let m = match a {
        Value::Matrix(m) if m.is_square() => m,
        other => {
            return Err(AdError::BadOperand {
                op: "logdet",
                expected: "square matrix",
                got: other.shape(),
            })
        }
    };
    let chol = nalgebra::linalg::Cholesky::new(m.clone()).ok_or(AdError::NotPositiveDefinite {
        node,
        op: "logdet",
    })?;
    let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok((Value::Scalar(ld), chol))
}

impl Tape {
    /// Number of nodes, inputs included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total scalar dimension across inputs.
    pub fn input_dim(&self) -> usize {
        self.input_shapes.iter().map(Shape::len).sum()
    }

    /// Total scalar dimension across outputs.
    pub fn output_dim(&self) -> usize {
        self.outputs
            .iter()
            .map(|v| self.nodes[v.0].value.shape().len())
            .sum()
    }

    pub fn counters(&self) -> SweepCounters {
        SweepCounters {
            forward_node_visits: self.fwd_visits,
            reverse_node_visits: self.rev_visits,
        }
    }

    pub fn reset_counters(&mut self) {
        self.fwd_visits = 0;
        self.rev_visits = 0;
    }

    /// Output values from the most recent evaluation.
    pub fn outputs(&self) -> Vec<Value> {
        self.outputs
            .iter()
            .map(|v| self.nodes[v.0].value.clone())
            .collect()
    }

    fn check_inputs(&self, inputs: &[Value]) -> Result<(), AdError> {
        if inputs.len() != self.inputs.len() {
            return Err(AdError::InputArity {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        for (i, (v, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if v.shape() != *s {
                return Err(AdError::InputShape {
                    index: i,
                    expected: *s,
                    got: v.shape(),
                });
            }
        }
        Ok(())
    }

    /// Re-evaluate the recorded program at new inputs and return the outputs.
    pub fn replay(&mut self, inputs: &[Value]) -> Result<Vec<Value>, AdError> {
        self.check_inputs(inputs)?;
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value = match &op {
                Op::Input(slot) => inputs[*slot].clone(),
                Op::Const => continue,
                Op::Add(a, b) => zip_map("add", self.value(*a), self.value(*b), |x, y| x + y)?,
                Op::Sub(a, b) => zip_map("sub", self.value(*a), self.value(*b), |x, y| x - y)?,
                Op::Mul(a, b) => zip_map("mul", self.value(*a), self.value(*b), |x, y| x * y)?,
                Op::Div(a, b) => zip_map("div", self.value(*a), self.value(*b), |x, y| x / y)?,
                Op::Neg(a) => map("neg", self.value(*a), |x| -x),
                Op::Sin(a) => map("sin", self.value(*a), f64::sin),
                Op::Cos(a) => map("cos", self.value(*a), f64::cos),
                Op::Exp(a) => map("exp", self.value(*a), f64::exp),
                Op::Ln(a) => map("log", self.value(*a), f64::ln),
                Op::Sqrt(a) => map("sqrt", self.value(*a), f64::sqrt),
                Op::Pow(a, p) => {
                    let p = *p;
                    map("pow", self.value(*a), |x| x.powf(p))
                }
                Op::Dot(a, b) => Value::Scalar(
                    self.vec(*a).dot(self.vec(*b)),
                ),
                Op::MatVec(a, b) => Value::Vector(self.mat(*a) * self.vec(*b)),
                Op::MatMul(a, b) => Value::Matrix(self.mat(*a) * self.mat(*b)),
                Op::CholSolve(a, b) => {
                    let (v, ch) = eval_chol_solve(i, self.value(*a), self.value(*b))?;
                    self.nodes[i].chol = Some(ch);
                    v
                }
                Op::LogDet(a) => {
                    let (v, ch) = eval_logdet(i, self.value(*a))?;
                    self.nodes[i].chol = Some(ch);
                    v
                }
                Op::Transpose(a) => Value::Matrix(self.mat(*a).transpose()),
                Op::Trace(a) => Value::Scalar(self.mat(*a).trace()),
                Op::Sum(a) => Value::Scalar(self.value(*a).sum()),
                Op::PackVector(es) => {
                    let data: Vec<f64> = es.iter().map(|e| self.scalar(*e)).collect();
                    Value::Vector(DVector::from_vec(data))
                }
                Op::PackMatrix(r, c, es) => {
                    let data: Vec<f64> = es.iter().map(|e| self.scalar(*e)).collect();
                    Value::Matrix(DMatrix::from_row_slice(*r, *c, &data))
                }
                Op::Index(a, k) => Value::Scalar(self.vec(*a)[*k]),
                Op::Elem(a, r, c) => Value::Scalar(self.mat(*a)[(*r, *c)]),
            };
            if !value.is_finite() {
                return Err(AdError::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(self.outputs())
    }

    fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar().expect("scalar node")
    }

    fn vec(&self, v: Var) -> &DVector<f64> {
        self.value(v).as_vector().expect("vector node")
    }

    fn mat(&self, v: Var) -> &DMatrix<f64> {
        self.value(v).as_matrix().expect("matrix node")
    }

    /// Full Jacobian by forward-mode accumulation: one tangent sweep per
    /// input coordinate. Rows index output coordinates, columns input
    /// coordinates (both in declaration order, column-major within values).
    pub fn forward_jacobian(&mut self, inputs: &[Value]) -> Result<DMatrix<f64>, AdError> {
        self.replay(inputs)?;
        let (n, m) = (self.input_dim(), self.output_dim());
        let mut jac = DMatrix::zeros(m, n);
        let mut col = 0;
        for slot in 0..self.inputs.len() {
            let shape = self.input_shapes[slot];
            for k in 0..shape.len() {
                let mut seeds: Vec<Value> = self
                    .input_shapes
                    .iter()
                    .map(|s| Value::zeros(*s))
                    .collect();
                set_flat(&mut seeds[slot], k, 1.0);
                let out_tans = self.jvp_sweep(&seeds);
                let mut row = 0;
                for t in &out_tans {
                    for x in t.flat() {
                        jac[(row, col)] = x;
                        row += 1;
                    }
                }
                col += 1;
            }
        }
        Ok(jac)
    }

    /// Full Jacobian by reverse-mode accumulation: one adjoint sweep per
    /// output coordinate. Same layout as [`Tape::forward_jacobian`].
    pub fn reverse_gradient(&mut self, inputs: &[Value]) -> Result<DMatrix<f64>, AdError> {
        self.replay(inputs)?;
        let (n, m) = (self.input_dim(), self.output_dim());
        let mut jac = DMatrix::zeros(m, n);
        let mut row = 0;
        for oi in 0..self.outputs.len() {
            let oshape = self.nodes[self.outputs[oi].0].value.shape();
            for k in 0..oshape.len() {
                let grads = self.vjp_sweep(oi, k);
                let mut col = 0;
                for g in &grads {
                    for x in g.flat() {
                        jac[(row, col)] = x;
                        col += 1;
                    }
                }
                row += 1;
            }
        }
        Ok(jac)
    }

    /// Gradient of a single scalar output, one adjoint value per input slot.
    pub fn gradient(&mut self, inputs: &[Value]) -> Result<Vec<Value>, AdError> {
        self.replay(inputs)?;
        if self.output_dim() != 1 {
            return Err(AdError::BadOperand {
                op: "gradient",
                expected: "single scalar output",
                got: self.nodes[self.outputs[0].0].value.shape(),
            });
        }
        Ok(self.vjp_sweep(0, 0))
    }

    /// One forward tangent sweep; `seeds` holds a tangent per input slot.
    fn jvp_sweep(&mut self, seeds: &[Value]) -> Vec<Value> {
        let mut tan: Vec<Value> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            self.fwd_visits += 1;
            let op = self.nodes[i].op.clone();
            let t = match &op {
                Op::Input(slot) => seeds[*slot].clone(),
                Op::Const => Value::zeros(self.nodes[i].value.shape()),
                Op::Add(a, b) => zip_map("add", &tan[a.0], &tan[b.0], |x, y| x + y).unwrap(),
                Op::Sub(a, b) => zip_map("sub", &tan[a.0], &tan[b.0], |x, y| x - y).unwrap(),
                Op::Mul(a, b) => {
                    let da = zip_map("mul", &tan[a.0], self.value(*b), |x, y| x * y).unwrap();
                    let db = zip_map("mul", self.value(*a), &tan[b.0], |x, y| x * y).unwrap();
                    zip_map("add", &da, &db, |x, y| x + y).unwrap()
                }
                Op::Div(a, b) => {
                    // d(a/b) = da/b - (z/b) db with z the cached quotient
                    let da = zip_map("div", &tan[a.0], self.value(*b), |x, y| x / y).unwrap();
                    let zb = zip_map("div", &self.nodes[i].value.clone(), self.value(*b), |x, y| {
                        x / y
                    })
                    .unwrap();
                    let db = zip_map("mul", &zb, &tan[b.0], |x, y| x * y).unwrap();
                    zip_map("sub", &da, &db, |x, y| x - y).unwrap()
                }
                Op::Neg(a) => map("neg", &tan[a.0], |x| -x),
                Op::Sin(a) => {
                    let ca = map("cos", self.value(*a), f64::cos);
                    zip_map("mul", &tan[a.0], &ca, |x, y| x * y).unwrap()
                }
                Op::Cos(a) => {
                    let sa = map("sin", self.value(*a), f64::sin);
                    let m = zip_map("mul", &tan[a.0], &sa, |x, y| x * y).unwrap();
                    map("neg", &m, |x| -x)
                }
                Op::Exp(a) => {
                    zip_map("mul", &tan[a.0], &self.nodes[i].value.clone(), |x, y| x * y).unwrap()
                }
                Op::Ln(a) => zip_map("div", &tan[a.0], self.value(*a), |x, y| x / y).unwrap(),
                Op::Sqrt(a) => {
                    let z = self.nodes[i].value.clone();
                    zip_map("div", &tan[a.0], &z, |x, y| x / (2.0 * y)).unwrap()
                }
                Op::Pow(a, p) => {
                    let p = *p;
                    let d = map("pow", self.value(*a), |x| p * x.powf(p - 1.0));
                    zip_map("mul", &tan[a.0], &d, |x, y| x * y).unwrap()
                }
                Op::Dot(a, b) => {
                    let t1 = tan[a.0].as_vector().unwrap().dot(self.vec(*b));
                    let t2 = self.vec(*a).dot(tan[b.0].as_vector().unwrap());
                    Value::Scalar(t1 + t2)
                }
                Op::MatVec(a, b) => {
                    let tm = tan[a.0].as_matrix().unwrap();
                    let tv = tan[b.0].as_vector().unwrap();
                    Value::Vector(tm * self.vec(*b) + self.mat(*a) * tv)
                }
                Op::MatMul(a, b) => {
                    let ta = tan[a.0].as_matrix().unwrap();
                    let tb = tan[b.0].as_matrix().unwrap();
                    Value::Matrix(ta * self.mat(*b) + self.mat(*a) * tb)
                }
                Op::CholSolve(a, b) => {
                    // dX = A^{-1} (dB - dA X)
                    let chol = self.nodes[i].chol.as_ref().unwrap();
                    let ta = tan[a.0].as_matrix().unwrap();
                    match (&tan[b.0], &self.nodes[i].value) {
                        (Value::Vector(tb), Value::Vector(x)) => {
                            Value::Vector(chol.solve(&(tb - ta * x)))
                        }
                        (Value::Matrix(tb), Value::Matrix(x)) => {
                            Value::Matrix(chol.solve(&(tb - ta * x)))
                        }
                        _ => unreachable!("shapes fixed at record time"),
                    }
                }
                Op::LogDet(a) => {
                    let chol = self.nodes[i].chol.as_ref().unwrap();
                    let ta = tan[a.0].as_matrix().unwrap();
                    Value::Scalar(chol.solve(ta).trace())
                }
                Op::Transpose(a) => Value::Matrix(tan[a.0].as_matrix().unwrap().transpose()),
                Op::Trace(a) => Value::Scalar(tan[a.0].as_matrix().unwrap().trace()),
                Op::Sum(a) => Value::Scalar(tan[a.0].sum()),
                Op::PackVector(es) => {
                    let data: Vec<f64> =
                        es.iter().map(|e| tan[e.0].as_scalar().unwrap()).collect();
                    Value::Vector(DVector::from_vec(data))
                }
                Op::PackMatrix(r, c, es) => {
                    let data: Vec<f64> =
                        es.iter().map(|e| tan[e.0].as_scalar().unwrap()).collect();
                    Value::Matrix(DMatrix::from_row_slice(*r, *c, &data))
                }
                Op::Index(a, k) => Value::Scalar(tan[a.0].as_vector().unwrap()[*k]),
                Op::Elem(a, r, c) => Value::Scalar(tan[a.0].as_matrix().unwrap()[(*r, *c)]),
            };
            tan.push(t);
        }
        self.outputs.iter().map(|v| tan[v.0].clone()).collect()
    }

    /// One reverse adjoint sweep seeded at flat coordinate `k` of output
    /// `oi`; returns the adjoint of each input slot.
    fn vjp_sweep(&mut self, oi: usize, k: usize) -> Vec<Value> {
        let mut adj: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| Value::zeros(n.value.shape()))
            .collect();
        set_flat(&mut adj[self.outputs[oi].0], k, 1.0);
        for i in (0..self.nodes.len()).rev() {
            self.rev_visits += 1;
            let z = adj[i].clone();
            let op = self.nodes[i].op.clone();
            match &op {
                Op::Input(_) | Op::Const => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adj, a, reduce_to(self.nodes[a.0].value.shape(), z.clone()));
                    accumulate(&mut adj, b, reduce_to(self.nodes[b.0].value.shape(), z));
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adj, a, reduce_to(self.nodes[a.0].value.shape(), z.clone()));
                    let nz = map("neg", &z, |x| -x);
                    accumulate(&mut adj, b, reduce_to(self.nodes[b.0].value.shape(), nz));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = zip_map("mul", &z, self.value(b), |x, y| x * y).unwrap();
                    let db = zip_map("mul", &z, self.value(a), |x, y| x * y).unwrap();
                    accumulate(&mut adj, a, reduce_to(self.nodes[a.0].value.shape(), da));
                    accumulate(&mut adj, b, reduce_to(self.nodes[b.0].value.shape(), db));
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = zip_map("div", &z, self.value(b), |x, y| x / y).unwrap();
                    let zq = zip_map("mul", &z, &self.nodes[i].value.clone(), |x, y| x * y)
                        .unwrap();
                    let db = map(
                        "neg",
                        &zip_map("div", &zq, self.value(b), |x, y| x / y).unwrap(),
                        |x| -x,
                    );
                    accumulate(&mut adj, a, reduce_to(self.nodes[a.0].value.shape(), da));
                    accumulate(&mut adj, b, reduce_to(self.nodes[b.0].value.shape(), db));
                }
                Op::Neg(a) => {
                    let a = *a;
                    accumulate(&mut adj, a, map("neg", &z, |x| -x));
                }
                Op::Sin(a) => {
                    let a = *a;
                    let d = map("cos", self.value(a), f64::cos);
                    accumulate(&mut adj, a, zip_map("mul", &z, &d, |x, y| x * y).unwrap());
                }
                Op::Cos(a) => {
                    let a = *a;
                    let d = map("sin", self.value(a), |x| -x.sin());
                    accumulate(&mut adj, a, zip_map("mul", &z, &d, |x, y| x * y).unwrap());
                }
                Op::Exp(a) => {
                    let a = *a;
                    let d = self.nodes[i].value.clone();
                    accumulate(&mut adj, a, zip_map("mul", &z, &d, |x, y| x * y).unwrap());
                }
                Op::Ln(a) => {
                    let a = *a;
                    accumulate(
                        &mut adj,
                        a,
                        zip_map("div", &z, self.value(a), |x, y| x / y).unwrap(),
                    );
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let d = self.nodes[i].value.clone();
                    accumulate(
                        &mut adj,
                        a,
                        zip_map("div", &z, &d, |x, y| x / (2.0 * y)).unwrap(),
                    );
                }
                Op::Pow(a, p) => {
                    let (a, p) = (*a, *p);
                    let d = map("pow", self.value(a), |x| p * x.powf(p - 1.0));
                    accumulate(&mut adj, a, zip_map("mul", &z, &d, |x, y| x * y).unwrap());
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let zs = z.as_scalar().unwrap();
                    let da = Value::Vector(self.vec(b) * zs);
                    let db = Value::Vector(self.vec(a) * zs);
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::MatVec(a, b) => {
                    let (a, b) = (*a, *b);
                    let zv = z.as_vector().unwrap();
                    let dm = Value::Matrix(zv * self.vec(b).transpose());
                    let dv = Value::Vector(self.mat(a).transpose() * zv);
                    accumulate(&mut adj, a, dm);
                    accumulate(&mut adj, b, dv);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let zm = z.as_matrix().unwrap();
                    let da = Value::Matrix(zm * self.mat(b).transpose());
                    let db = Value::Matrix(self.mat(a).transpose() * zm);
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::CholSolve(a, b) => {
                    // w = A^{-1} zbar; Bbar += w; Abar -= w X^T
                    let (a, b) = (*a, *b);
                    let chol = self.nodes[i].chol.as_ref().unwrap();
                    match (&z, &self.nodes[i].value) {
                        (Value::Vector(zv), Value::Vector(x)) => {
                            let w = chol.solve(zv);
                            let da = Value::Matrix(-(&w * x.transpose()));
                            accumulate(&mut adj, a, da);
                            accumulate(&mut adj, b, Value::Vector(w));
                        }
                        (Value::Matrix(zm), Value::Matrix(x)) => {
                            let w = chol.solve(zm);
                            let da = Value::Matrix(-(&w * x.transpose()));
                            accumulate(&mut adj, a, da);
                            accumulate(&mut adj, b, Value::Matrix(w));
                        }
                        _ => unreachable!("shapes fixed at record time"),
                    }
                }
                Op::LogDet(a) => {
                    let a = *a;
                    let chol = self.nodes[i].chol.as_ref().unwrap();
                    let zs = z.as_scalar().unwrap();
                    let inv = chol.inverse();
                    accumulate(&mut adj, a, Value::Matrix(inv * zs));
                }
                Op::Transpose(a) => {
                    let a = *a;
                    accumulate(
                        &mut adj,
                        a,
                        Value::Matrix(z.as_matrix().unwrap().transpose()),
                    );
                }
                Op::Trace(a) => {
                    let a = *a;
                    let n = self.mat(a).nrows();
                    let zs = z.as_scalar().unwrap();
                    accumulate(&mut adj, a, Value::Matrix(DMatrix::identity(n, n) * zs));
                }
                Op::Sum(a) => {
                    let a = *a;
                    let zs = z.as_scalar().unwrap();
                    let shape = self.nodes[a.0].value.shape();
                    let filled = match shape {
                        Shape::Scalar => Value::Scalar(zs),
                        Shape::Vector(n) => Value::Vector(DVector::from_element(n, zs)),
                        Shape::Matrix(r, c) => Value::Matrix(DMatrix::from_element(r, c, zs)),
                    };
                    accumulate(&mut adj, a, filled);
                }
                Op::PackVector(es) => {
                    let es = es.clone();
                    let zv = z.as_vector().unwrap().clone();
                    for (idx, e) in es.iter().enumerate() {
                        accumulate(&mut adj, *e, Value::Scalar(zv[idx]));
                    }
                }
                Op::PackMatrix(_, c, es) => {
                    let (c, es) = (*c, es.clone());
                    let zm = z.as_matrix().unwrap().clone();
                    for (idx, e) in es.iter().enumerate() {
                        accumulate(&mut adj, *e, Value::Scalar(zm[(idx / c, idx % c)]));
                    }
                }
                Op::Index(a, k) => {
                    let (a, k) = (*a, *k);
                    let zs = z.as_scalar().unwrap();
                    if let Value::Vector(av) = &mut adj[a.0] {
                        av[k] += zs;
                    }
                }
                Op::Elem(a, r, c) => {
                    let (a, r, c) = (*a, *r, *c);
                    let zs = z.as_scalar().unwrap();
                    if let Value::Matrix(am) = &mut adj[a.0] {
                        am[(r, c)] += zs;
                    }
                }
            }
        }
        self.inputs.iter().map(|v| adj[v.0].clone()).collect()
    }
}

fn accumulate(adj: &mut [Value], v: Var, contribution: Value) {
    adj[v.0].add_assign(&contribution);
}

fn set_flat(v: &mut Value, k: usize, x: f64) {
    match v {
        Value::Scalar(s) => {
            debug_assert_eq!(k, 0);
            *s = x;
        }
        Value::Vector(vec) => vec[k] = x,
        Value::Matrix(m) => m[k] = x,
    }
}
