use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul, Shape, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Marks a tape length that [`Tape::rollback`] can truncate back to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

/// Recorded operation. Parents always have smaller indices than the node itself.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// Tensor times a `1×1` node.
    MulScalar(NodeId, NodeId),
    /// `r×c` plus a `1×c` row added to every row.
    AddRow(NodeId, NodeId),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    /// `1` where the input is positive, `slope` elsewhere. Treated as constant.
    StepMask(NodeId, f64),
    /// Elementwise sign, `0` at `0`. Treated as constant.
    SignMask(NodeId),
    Sum(NodeId),
    /// Column sums, `r×c → 1×c`.
    SumRows(NodeId),
    /// Row sums, `r×c → r×1`.
    SumCols(NodeId),
    BroadcastScalar(NodeId, Shape),
    /// Repeat a `1×c` row `rows` times.
    BroadcastRows(NodeId, usize),
    /// Repeat an `r×1` column `cols` times.
    BroadcastCols(NodeId, usize),
    Dot(NodeId, NodeId),
    /// Per-row log-sum-exp, `r×c → r×1`.
    LogSumExpRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { input: NodeId, start: usize, len: usize },
    /// Inverse of `SliceCols`: place the input at column `start` of a zero matrix.
    PadCols { input: NodeId, start: usize, total: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::StepMask(..) => "step_mask",
            Op::SignMask(..) => "sign_mask",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Dot(..) => "dot",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MulScalar(a, b) | AddRow(a, b)
            | Dot(a, b) | ConcatCols(a, b) => vec![a, b],
            MatMul { a, b, .. } => vec![a, b],
            Neg(a) | Scale(a, _) | AddConst(a, _) | Relu(a) | LeakyRelu(a, _) | Tanh(a)
            | Sigmoid(a) | Exp(a) | Log(a) | Sin(a) | Cos(a) | Sqrt(a) | Abs(a)
            | StepMask(a, _) | SignMask(a) | Sum(a) | SumRows(a) | SumCols(a)
            | BroadcastScalar(a, _) | BroadcastRows(a, _) | BroadcastCols(a, _)
            | LogSumExpRows(a) => vec![a],
            SliceCols { input, .. } | PadCols { input, .. } => vec![input],
        }
    }

    /// Ops whose output carries no derivative information back to their inputs.
    pub fn is_constant_derivative(&self) -> bool {
        matches!(self, Op::StepMask(..) | Op::SignMask(..))
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

impl Node {
    pub fn shape(&self) -> Shape {
        self.value.shape()
    }
}

/// Append-only store of eagerly evaluated nodes.
///
/// Every constructor evaluates its node immediately, so a node's value is
/// available (and fixed) as soon as its handle exists. Gradients produced by
/// [`Tape::grad`] are ordinary nodes and can be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// The evaluated value of `id`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.node(id).map(|n| &n.value)
    }

    pub fn shape(&self, id: NodeId) -> Result<Shape> {
        self.node(id).map(|n| n.shape())
    }

    /// The value of a `1×1` node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id)?.item()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.nodes.len())
    }

    /// Drop every node created after `mark`. Handles to dropped nodes become invalid.
    pub fn rollback(&mut self, mark: Checkpoint) {
        self.nodes.truncate(mark.0);
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    /// Reassign a leaf's value. Only allowed while no op node sits above it,
    /// which is the state right after rolling back to a checkpoint taken
    /// once the leaves were created.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.node(id)?;
        if node.op != Op::Leaf {
            return Err(AutodiffError::NotALeaf(id.0));
        }
        if node.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_leaf",
                left: node.shape(),
                right: value.shape(),
            });
        }
        if self.nodes[id.0 + 1..].iter().any(|n| n.op != Op::Leaf) {
            return Err(AutodiffError::LeafInUse(id.0));
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    /// Record `op`, evaluating it against its (already evaluated) parents.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        for p in op.parents() {
            if p.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(p.0));
            }
        }
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let same = |name: &'static str, a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                Err(AutodiffError::ShapeMismatch { op: name, left: a.shape(), right: b.shape() })
            } else {
                Ok(())
            }
        };
        let name = op.name();
        Ok(match op {
            Op::Leaf => {
                return Err(AutodiffError::InvalidArgument {
                    op: "push",
                    reason: "leaves are created with Tape::leaf".into(),
                })
            }
            Op::Add(a, b) => {
                same(name, v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(name, v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(name, v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x * y)
            }
            Op::Div(a, b) => {
                same(name, v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x / y)
            }
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                v(a).map(|x| x * c)
            }
            Op::AddConst(a, c) => {
                let c = *c;
                v(a).map(|x| x + c)
            }
            Op::MulScalar(a, s) => {
                let s = v(s);
                if !s.shape().is_scalar() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: v(a).shape(),
                        right: s.shape(),
                    });
                }
                let c = s.data()[0];
                v(a).map(|x| x * c)
            }
            Op::AddRow(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: a.shape(),
                        right: b.shape(),
                    });
                }
                let mut out = a.clone();
                let c = a.cols();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += b.data()[i % c];
                }
                out
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (a, b) = (v(a), v(b));
                let inner_a = if *trans_a { a.rows() } else { a.cols() };
                let inner_b = if *trans_b { b.cols() } else { b.rows() };
                if inner_a != inner_b {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: a.shape(),
                        right: b.shape(),
                    });
                }
                matmul(a, b, *trans_a, *trans_b)
            }
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                v(a).map(|x| if x > 0.0 { x } else { s * x })
            }
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Sigmoid(a) => v(a).map(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Sin(a) => v(a).map(f64::sin),
            Op::Cos(a) => v(a).map(f64::cos),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::StepMask(a, s) => {
                let s = *s;
                v(a).map(|x| if x > 0.0 { 1.0 } else { s })
            }
            Op::SignMask(a) => v(a).map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::SumRows(a) => {
                let a = v(a);
                let mut out = vec![0.0; a.cols()];
                for r in 0..a.rows() {
                    for (o, x) in out.iter_mut().zip(a.row_slice(r)) {
                        *o += x;
                    }
                }
                Tensor::from_shape(Shape::new(1, a.cols()), out)
            }
            Op::SumCols(a) => {
                let a = v(a);
                let out = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
                Tensor::from_shape(Shape::new(a.rows(), 1), out)
            }
            Op::BroadcastScalar(s, shape) => {
                let s = v(s);
                if !s.shape().is_scalar() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: s.shape(),
                        right: Shape::SCALAR,
                    });
                }
                Tensor::filled(shape.rows, shape.cols, s.data()[0])
            }
            Op::BroadcastRows(a, rows) => {
                let a = v(a);
                if a.rows() != 1 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: a.shape(),
                        right: Shape::new(1, a.cols()),
                    });
                }
                let mut out = Vec::with_capacity(rows * a.cols());
                for _ in 0..*rows {
                    out.extend_from_slice(a.data());
                }
                Tensor::from_shape(Shape::new(*rows, a.cols()), out)
            }
            Op::BroadcastCols(a, cols) => {
                let a = v(a);
                if a.cols() != 1 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: a.shape(),
                        right: Shape::new(a.rows(), 1),
                    });
                }
                let mut out = Vec::with_capacity(a.rows() * cols);
                for &x in a.data() {
                    out.extend(std::iter::repeat_n(x, *cols));
                }
                Tensor::from_shape(Shape::new(a.rows(), *cols), out)
            }
            Op::Dot(a, b) => {
                same(name, v(a), v(b))?;
                Tensor::scalar(v(a).data().iter().zip(v(b).data()).map(|(x, y)| x * y).sum())
            }
            Op::LogSumExpRows(a) => {
                let a = v(a);
                let out = (0..a.rows())
                    .map(|r| {
                        let row = a.row_slice(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                    })
                    .collect();
                Tensor::from_shape(Shape::new(a.rows(), 1), out)
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rows() != b.rows() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        left: a.shape(),
                        right: b.shape(),
                    });
                }
                let mut out = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    out.extend_from_slice(a.row_slice(r));
                    out.extend_from_slice(b.row_slice(r));
                }
                Tensor::from_shape(Shape::new(a.rows(), a.cols() + b.cols()), out)
            }
            Op::SliceCols { input, start, len } => {
                let a = v(input);
                if start + len > a.cols() {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("columns {start}..{} out of {}", start + len, a.cols()),
                    });
                }
                let mut out = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    out.extend_from_slice(&a.row_slice(r)[*start..start + len]);
                }
                Tensor::from_shape(Shape::new(a.rows(), *len), out)
            }
            Op::PadCols { input, start, total } => {
                let a = v(input);
                if start + a.cols() > *total {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        reason: format!("{} columns at {start} exceed {total}", a.cols()),
                    });
                }
                let mut out = vec![0.0; a.rows() * total];
                for r in 0..a.rows() {
                    out[r * total + start..r * total + start + a.cols()]
                        .copy_from_slice(a.row_slice(r));
                }
                Tensor::from_shape(Shape::new(a.rows(), *total), out)
            }
        })
    }

    // Builders. Each records one op and returns its handle.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddConst(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::MulScalar(a, s))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, trans_a: false, trans_b: false })
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, trans_a, trans_b })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.shape(a)?.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, shape: Shape) -> Result<NodeId> {
        self.push(Op::BroadcastScalar(s, shape))
    }

    pub fn broadcast_rows(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        self.push(Op::BroadcastRows(row, rows))
    }

    pub fn broadcast_cols(&mut self, col: NodeId, cols: usize) -> Result<NodeId> {
        self.push(Op::BroadcastCols(col, cols))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(a, b))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExpRows(a))
    }

    /// Row-wise `a - logsumexp(a)`.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = self.shape(a)?.cols;
        let lse = self.logsumexp_rows(a)?;
        let lse = self.broadcast_cols(lse, cols)?;
        self.sub(a, lse)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { input: a, start, len })
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        self.push(Op::PadCols { input: a, start, total })
    }

    pub(crate) fn step_mask(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::StepMask(a, slope))
    }

    pub(crate) fn sign_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SignMask(a))
    }
}
