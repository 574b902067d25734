//! Eager tape of dense 2-D nodes.
//!
//! Every value is an `Array2<f64>`; scalars are `1x1`, row vectors `1xn`.
//! Elementwise binary ops broadcast along any axis whose length is 1, so a
//! `1xn` bias adds to an `mxn` batch and an `mx1` column scales each row.

use ndarray::{s, Array2, Axis as NdAxis, Zip};

use crate::error::{DiffError, Result, Shape};

pub type Array = Array2<f64>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl Axis {
    fn nd(self) -> NdAxis {
        match self {
            Axis::Rows => NdAxis(0),
            Axis::Cols => NdAxis(1),
        }
    }
}

/// Primitive operation tag.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Offset(f64),
    MatMul,
    Tanh,
    Sigmoid,
    Softplus,
    Elu,
    Exp,
    Log,
    Square,
    /// Sum of all entries, `1x1`.
    Sum,
    /// Mean of all entries, `1x1`.
    Mean,
    /// Row-wise sum over columns, `mx1`.
    SumCols,
    Concat(Axis),
    Slice { axis: Axis, start: usize, end: usize },
    /// `mean + std * noise` with the recorded noise.
    GaussianSample(Array),
    /// Diagonal Gaussian log-density of `x` under `(mean, std)`, summed per row.
    GaussianLogDensity,
    /// `KL(N(mean_q, std_q) || N(mean_p, std_p))`, summed per row.
    GaussianKl,
    StopGradient,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::MatMul => "matmul",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Elu => "elu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumCols => "sum_cols",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GaussianSample(_) => "gaussian_sample",
            Op::GaussianLogDensity => "gaussian_log_density",
            Op::GaussianKl => "gaussian_kl",
            Op::StopGradient => "stop_gradient",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::GaussianSample(_) => Some(2),
            Op::GaussianLogDensity => Some(3),
            Op::GaussianKl => Some(4),
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Var>,
    pub(crate) requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[Var] {
        &self.parents
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn shape_of(a: &Array) -> Shape {
    a.dim()
}

fn broadcast_dim(x: usize, y: usize) -> Option<usize> {
    if x == y {
        Some(x)
    } else if x == 1 {
        Some(y)
    } else if y == 1 {
        Some(x)
    } else {
        None
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    match (broadcast_dim(a.0, b.0), broadcast_dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            shapes: vec![a, b],
        }),
    }
}

pub(crate) fn zip_broadcast(a: &Array, b: &Array, shape: Shape, f: impl Fn(f64, f64) -> f64) -> Array {
    let av = a.broadcast(shape).expect("checked broadcast");
    let bv = b.broadcast(shape).expect("checked broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// An eagerly evaluated computation graph. Nodes are appended in evaluation
/// order, so parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array::from_elem((1, 1), x))
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// First entry of the node value; intended for `1x1` nodes.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array, op: Op, parents: Vec<Var>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(id)
    }

    /// Applies a primitive to existing nodes, evaluating it eagerly.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(DiffError::Arity {
                    op: op.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(DiffError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode(v.0));
            }
        }
        if op == Op::Leaf {
            return Err(DiffError::InvalidOp {
                op: "leaf",
                reason: "use Tape::param or Tape::constant".into(),
            });
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad =
            !matches!(op, Op::StopGradient) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Array> {
        let name = op.name();
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let same_shape = |idx: &[usize]| -> Result<()> {
            let s0 = val(idx[0]).dim();
            if idx.iter().all(|&i| val(i).dim() == s0) {
                Ok(())
            } else {
                Err(DiffError::ShapeMismatch {
                    op: name,
                    shapes: idx.iter().map(|&i| val(i).dim()).collect(),
                })
            }
        };
        let out = match op {
            Op::Leaf => unreachable!("rejected in apply"),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                let shape = broadcast_shape(name, a.dim(), b.dim())?;
                match op {
                    Op::Add => zip_broadcast(a, b, shape, |x, y| x + y),
                    Op::Sub => zip_broadcast(a, b, shape, |x, y| x - y),
                    _ => zip_broadcast(a, b, shape, |x, y| x * y),
                }
            }
            Op::Neg => val(0).mapv(|x| -x),
            Op::Scale(c) => {
                let c = *c;
                val(0).mapv(|x| c * x)
            }
            Op::Offset(c) => {
                let c = *c;
                val(0).mapv(|x| x + c)
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.ncols() != b.nrows() {
                    return Err(DiffError::ShapeMismatch {
                        op: name,
                        shapes: vec![a.dim(), b.dim()],
                    });
                }
                a.dot(b)
            }
            Op::Tanh => val(0).mapv(f64::tanh),
            Op::Sigmoid => val(0).mapv(sigmoid),
            Op::Softplus => val(0).mapv(softplus),
            Op::Elu => val(0).mapv(elu),
            Op::Exp => val(0).mapv(f64::exp),
            Op::Log => val(0).mapv(f64::ln),
            Op::Square => val(0).mapv(|x| x * x),
            Op::Sum => Array::from_elem((1, 1), val(0).sum()),
            Op::Mean => {
                let a = val(0);
                if a.is_empty() {
                    return Err(DiffError::InvalidOp {
                        op: name,
                        reason: "mean of an empty array".into(),
                    });
                }
                Array::from_elem((1, 1), a.sum() / a.len() as f64)
            }
            Op::SumCols => val(0).sum_axis(NdAxis(1)).insert_axis(NdAxis(1)),
            Op::Concat(axis) => {
                let views: Vec<_> = inputs.iter().map(|v| self.nodes[v.0].value.view()).collect();
                ndarray::concatenate(axis.nd(), &views).map_err(|_| DiffError::ShapeMismatch {
                    op: name,
                    shapes: inputs.iter().map(|v| self.nodes[v.0].value.dim()).collect(),
                })?
            }
            Op::Slice { axis, start, end } => {
                let a = val(0);
                let len = a.len_of(axis.nd());
                if start > end || *end > len {
                    return Err(DiffError::InvalidOp {
                        op: name,
                        reason: format!("range {start}..{end} out of bounds for shape {:?}", a.dim()),
                    });
                }
                match axis {
                    Axis::Rows => a.slice(s![*start..*end, ..]).to_owned(),
                    Axis::Cols => a.slice(s![.., *start..*end]).to_owned(),
                }
            }
            Op::GaussianSample(noise) => {
                let (mean, std) = (val(0), val(1));
                if mean.dim() != std.dim() || mean.dim() != noise.dim() {
                    return Err(DiffError::ShapeMismatch {
                        op: name,
                        shapes: vec![mean.dim(), std.dim(), noise.dim()],
                    });
                }
                Zip::from(mean)
                    .and(std)
                    .and(noise)
                    .map_collect(|&m, &s, &e| m + s * e)
            }
            Op::GaussianLogDensity => {
                same_shape(&[0, 1, 2])?;
                let terms = Zip::from(val(0))
                    .and(val(1))
                    .and(val(2))
                    .map_collect(|&x, &m, &s| {
                        let z = (x - m) / s;
                        -0.5 * z * z - s.ln() - HALF_LN_2PI
                    });
                terms.sum_axis(NdAxis(1)).insert_axis(NdAxis(1))
            }
            Op::GaussianKl => {
                same_shape(&[0, 1, 2, 3])?;
                let mut terms = Array::zeros(val(0).dim());
                Zip::from(&mut terms)
                    .and(val(0))
                    .and(val(1))
                    .and(val(2))
                    .and(val(3))
                    .for_each(|t, &mq, &sq, &mp, &sp| {
                        let d = mq - mp;
                        *t = (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
                    });
                terms.sum_axis(NdAxis(1)).insert_axis(NdAxis(1))
            }
            Op::StopGradient => val(0).clone(),
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Offset(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Elu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumCols, &[a])
    }

    pub fn concat(&mut self, axis: Axis, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(a, Axis::Cols, start, end)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(a, Axis::Rows, start, end)
    }

    pub fn gaussian_sample(&mut self, mean: Var, std: Var, noise: Array) -> Result<Var> {
        self.apply(Op::GaussianSample(noise), &[mean, std])
    }

    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        self.apply(Op::GaussianLogDensity, &[x, mean, std])
    }

    pub fn gaussian_kl(&mut self, mean_q: Var, std_q: Var, mean_p: Var, std_p: Var) -> Result<Var> {
        self.apply(Op::GaussianKl, &[mean_q, std_q, mean_p, std_p])
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::StopGradient, &[a])
    }

    /// `x @ w + b` for a row-batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_parent(&mut self, node: Var, parent_index: usize, new_parent: Var) {
        self.nodes[node.0].parents[parent_index] = new_parent;
    }
}
