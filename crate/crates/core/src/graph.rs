//! Reverse-mode automatic differentiation over dense row-major f64 tensors.
//!
//! Every operation is evaluated eagerly and recorded on a per-graph tape.
//! `backward` emits the adjoint computation as ordinary tape nodes, so a
//! gradient returned with `retain_graph` is itself a differentiable node and
//! a second backward pass over an expression built from gradients is valid.
//! That property is what the salience-constraint losses rely on: they are
//! functions of input gradients and are minimized over model parameters.
//!
//! The op set is a small closed basis: the vector-Jacobian product of every
//! op is expressible in the basis itself, which makes higher-order gradients
//! correct by induction. Composite operations (softmax, convolution, axis
//! reductions) are built from the basis ops.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense tensor value: shape plus row-major data behind an `Arc` so model
/// parameters can be shared read-only across per-instance graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable access for optimizer updates; clones the buffer only if it is
    /// still shared with a live graph.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant index plan shared by `Gather` and its adjoint `ScatterAdd`.
///
/// `indices` has one entry per destination element; an entry of -1 reads a
/// zero (gather) or drops the element (scatter).
#[derive(Debug)]
pub struct IndexPlan {
    pub src_shape: Vec<usize>,
    pub dst_shape: Vec<usize>,
    pub indices: Vec<i64>,
}

impl IndexPlan {
    pub fn new(src_shape: Vec<usize>, dst_shape: Vec<usize>, indices: Vec<i64>) -> Result<Self> {
        let dst_numel: usize = dst_shape.iter().product();
        let src_numel: usize = src_shape.iter().product();
        if indices.len() != dst_numel {
            return Err(Error::InvalidArgument {
                op: "IndexPlan::new",
                detail: format!("{} indices for dst of {} elements", indices.len(), dst_numel),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_numel as i64 || i < -1) {
            return Err(Error::InvalidArgument {
                op: "IndexPlan::new",
                detail: format!("index {} out of range for src of {} elements", bad, src_numel),
            });
        }
        Ok(IndexPlan {
            src_shape,
            dst_shape,
            indices,
        })
    }

    /// Broadcast a scalar to `shape`.
    pub fn broadcast_scalar(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        IndexPlan {
            src_shape: vec![1],
            dst_shape: shape.to_vec(),
            indices: vec![0; numel],
        }
    }

    /// Select whole rows of a `[rows, cols]` matrix; `-1` selects a zero row.
    pub fn select_rows(src_rows: usize, cols: usize, rows: &[i64]) -> Self {
        let mut indices = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            for c in 0..cols {
                indices.push(if r < 0 { -1 } else { r * cols as i64 + c as i64 });
            }
        }
        IndexPlan {
            src_shape: vec![src_rows, cols],
            dst_shape: vec![rows.len(), cols],
            indices,
        }
    }

    /// Pick individual elements of a flat vector.
    pub fn select_elements(src_len: usize, picks: &[usize]) -> Self {
        IndexPlan {
            src_shape: vec![src_len],
            dst_shape: vec![picks.len()],
            indices: picks.iter().map(|&i| i as i64).collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Square(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    MinScalar(NodeId, f64),
    MaxScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Gather(NodeId, Arc<IndexPlan>),
    ScatterAdd(NodeId, Arc<IndexPlan>),
    MulConst(NodeId, Arc<Vec<f64>>),
    SumAll(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a) | AddScalar(a, _) | MulScalar(a, _) | Square(a) | Tanh(a) | Exp(a) | Ln(a)
            | Abs(a) | MinScalar(a, _) | MaxScalar(a, _) | Transpose(a) | Reshape(a)
            | SumAll(a) => [Some(a), None],
            Gather(a, _) | ScatterAdd(a, _) | MulConst(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Map from target node to its gradient node, as returned by
/// [`Graph::backward`]. Targets that the output does not depend on get a
/// zero gradient and are listed in `unreachable`.
pub struct GradientMap {
    grads: HashMap<NodeId, NodeId>,
    pub unreachable: Vec<NodeId>,
}

impl GradientMap {
    pub fn grad(&self, target: NodeId) -> Option<NodeId> {
        self.grads.get(&target).copied()
    }
}

/// Convolution padding mode along the token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPad {
    /// Output length equals input length; out-of-range taps read zero.
    Same,
    /// No padding; output length is `len - width + 1`.
    Valid,
}

/// Arena-allocated computation graph (tape). Single-writer: distinct
/// instances use distinct graphs and may be evaluated in parallel.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        let requires_grad = match op.inputs() {
            [None, None] => false,
            [Some(a), None] => self.nodes[a.0].requires_grad,
            [Some(a), Some(b)] => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            _ => unreachable!(),
        };
        self.nodes.push(Node {
            shape,
            values: Arc::new(values),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf node. Leaves have empty lineage; `requires_grad` marks
    /// parameters and other gradient targets.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape: tensor.shape.clone(),
            values: Arc::clone(&tensor.data),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> NodeId {
        self.leaf(tensor, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(&Tensor::scalar(v), false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].values.len()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].values[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: Arc::clone(&self.nodes[id.0].values),
        }
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a, b)))
    }

    /// Elementwise division. Rejects divisors with magnitude below 1e-12;
    /// guard the denominator (e.g. via [`Graph::add_scalar`]) first.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        if let Some(&bad) = self.nodes[b.0].values.iter().find(|v| v.abs() < 1e-12) {
            return Err(Error::DivisorNearZero {
                magnitude: bad.abs(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Div(a, b)))
    }

    /// Epsilon-guarded division `a / (b + eps)`.
    pub fn div_eps(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let guarded = self.add_scalar(b, eps);
        self.div(a, guarded)
    }

    // ── elementwise unary ───────────────────────────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), values, op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.nodes[a.0].values.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    /// Absolute value. The subgradient at exactly 0 is fixed to 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `min(x, c)`; subgradient at `x == c` is 1.
    pub fn min_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x.min(c), Op::MinScalar(a, c))
    }

    /// Elementwise `max(x, c)`; subgradient at `x == c` is 1.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x.max(c), Op::MaxScalar(a, c))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "a 2-D tensor",
                got: s.clone(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "a shape with matching element count",
                got: shape,
            });
        }
        let values = self.nodes[a.0].values.to_vec();
        Ok(self.push(shape, values, Op::Reshape(a)))
    }

    // ── gather / scatter and reductions ─────────────────────────────────

    pub fn gather(&mut self, a: NodeId, plan: Arc<IndexPlan>) -> Result<NodeId> {
        if self.nodes[a.0].shape != plan.src_shape {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: plan.src_shape.clone(),
            });
        }
        let v = &self.nodes[a.0].values;
        let out: Vec<f64> = plan
            .indices
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { v[i as usize] })
            .collect();
        let shape = plan.dst_shape.clone();
        Ok(self.push(shape, out, Op::Gather(a, plan)))
    }

    /// Adjoint of [`Graph::gather`]: accumulate elements of `a` (shaped like
    /// the plan's destination) back into the plan's source shape.
    pub fn scatter_add(&mut self, a: NodeId, plan: Arc<IndexPlan>) -> Result<NodeId> {
        if self.nodes[a.0].shape != plan.dst_shape {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: plan.dst_shape.clone(),
            });
        }
        let v = &self.nodes[a.0].values;
        let mut out = vec![0.0; plan.src_shape.iter().product()];
        for (x, &i) in v.iter().zip(plan.indices.iter()) {
            if i >= 0 {
                out[i as usize] += x;
            }
        }
        let shape = plan.src_shape.clone();
        Ok(self.push(shape, out, Op::ScatterAdd(a, plan)))
    }

    /// Multiply by a constant factor that is not part of the lineage graph
    /// (Bernoulli gates, dropout masks). No gradient flows into the factor.
    pub fn mul_const(&mut self, a: NodeId, factor: Arc<Vec<f64>>) -> Result<NodeId> {
        if factor.len() != self.numel(a) {
            return Err(Error::InvalidArgument {
                op: "mul_const",
                detail: format!("factor length {} vs {} elements", factor.len(), self.numel(a)),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(factor.iter())
            .map(|(x, f)| x * f)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::MulConst(a, factor)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    /// Sum a `[rows, cols]` matrix over one axis.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || axis > 1 {
            return Err(Error::BadShape {
                op: "sum_axis",
                expected: "a 2-D tensor and axis 0 or 1",
                got: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let keep = if axis == 0 { c } else { r };
        let mut indices = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                indices.push(if axis == 0 { j as i64 } else { i as i64 });
            }
        }
        let plan = Arc::new(IndexPlan {
            src_shape: vec![keep],
            dst_shape: vec![r, c],
            indices,
        });
        self.scatter_add(a, plan)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.nodes[a.0].shape.clone();
        let summed = self.sum_axis(a, axis)?;
        let n = if axis == 0 { s[0] } else { s[1] };
        Ok(self.mul_scalar(summed, 1.0 / n as f64))
    }

    /// Max over an axis of a 1-D or 2-D tensor. Returns the max values and
    /// the argmax indices; ties break toward the lowest index, and the
    /// gradient flows only to the argmax elements.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<(NodeId, Vec<usize>)> {
        let s = self.nodes[a.0].shape.clone();
        let v = Arc::clone(&self.nodes[a.0].values);
        let (groups, stride, group_len) = match (s.len(), axis) {
            (1, 0) => (1, 1, s[0]),
            (2, 1) => (s[0], 1, s[1]),
            (2, 0) => (s[1], s[1], s[0]),
            _ => {
                return Err(Error::BadShape {
                    op: "max_axis",
                    expected: "a 1-D or 2-D tensor and a valid axis",
                    got: s,
                })
            }
        };
        if group_len == 0 {
            return Err(Error::InvalidArgument {
                op: "max_axis",
                detail: "empty axis".into(),
            });
        }
        let mut argmax = Vec::with_capacity(groups);
        let mut picks = Vec::with_capacity(groups);
        for g in 0..groups {
            let base = if s.len() == 2 && axis == 0 { g } else { g * group_len };
            let mut best = 0usize;
            for i in 1..group_len {
                if v[base + i * stride] > v[base + best * stride] {
                    best = i;
                }
            }
            argmax.push(best);
            picks.push(base + best * stride);
        }
        let plan = Arc::new(IndexPlan::select_elements(v.len(), &picks));
        // reinterpret the flat src as the node's real shape
        let plan = Arc::new(IndexPlan {
            src_shape: self.nodes[a.0].shape.clone(),
            dst_shape: plan.dst_shape.clone(),
            indices: plan.indices.clone(),
        });
        let out = self.gather(a, plan)?;
        Ok((out, argmax))
    }

    /// Broadcast a single-element node to `shape`.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.numel(a) != 1 {
            return Err(Error::BadShape {
                op: "broadcast_scalar",
                expected: "a single-element tensor",
                got: self.nodes[a.0].shape.clone(),
            });
        }
        let mut plan = IndexPlan::broadcast_scalar(shape);
        plan.src_shape = self.nodes[a.0].shape.clone();
        self.gather(a, Arc::new(plan))
    }

    /// Numerically stable softmax of a 1-D tensor. The max shift is a
    /// detached constant; the result is unchanged by it, so gradients are
    /// exact.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "a non-empty 1-D tensor",
                got: s,
            });
        }
        let m = self.nodes[a.0]
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(a, -m);
        let e = self.exp(shifted);
        let total = self.sum_all(e);
        let denom = self.broadcast_scalar(total, &s)?;
        self.div(e, denom)
    }

    /// `ln(sum(exp(a)))` with the usual max shift, for stable cross-entropy.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.nodes[a.0]
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(a, -m);
        let e = self.exp(shifted);
        let total = self.sum_all(e);
        let lse = self.ln(total)?;
        Ok(self.add_scalar(lse, m))
    }

    /// 1-D convolution over the token axis. `input` is `[len, d]`, `kernel`
    /// is `[width * d, k]`, `bias` is `[k]`; returns `[out_len, k]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
        pad: ConvPad,
    ) -> Result<NodeId> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 2 || sk.len() != 2 || sk[0] != width * si[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: si,
                rhs: sk,
            });
        }
        let (len, d) = (si[0], si[1]);
        let k = sk[1];
        let (out_len, left) = match pad {
            ConvPad::Same => (len, (width - 1) / 2),
            ConvPad::Valid => {
                if len < width {
                    return Err(Error::InvalidArgument {
                        op: "conv1d",
                        detail: format!("input length {len} shorter than kernel width {width}"),
                    });
                }
                (len - width + 1, 0)
            }
        };
        // im2col: patches[t, j*d + c] = input[t + j - left, c]
        let mut indices = Vec::with_capacity(out_len * width * d);
        for t in 0..out_len {
            for j in 0..width {
                let src = t as i64 + j as i64 - if pad == ConvPad::Same { left as i64 } else { 0 };
                for c in 0..d {
                    indices.push(if src < 0 || src >= len as i64 {
                        -1
                    } else {
                        src * d as i64 + c as i64
                    });
                }
            }
        }
        let plan = Arc::new(IndexPlan {
            src_shape: vec![len, d],
            dst_shape: vec![out_len, width * d],
            indices,
        });
        let patches = self.gather(input, plan)?;
        let features = self.matmul(patches, kernel)?;
        let bias_plan = Arc::new(IndexPlan {
            src_shape: vec![k],
            dst_shape: vec![out_len, k],
            indices: (0..out_len * k).map(|i| (i % k) as i64).collect(),
        });
        let bias_b = self.gather(bias, bias_plan)?;
        self.add(features, bias_b)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `output` to every node in `targets`.
    ///
    /// Gradients are accumulated as new tape nodes in creation order, so the
    /// result is deterministic. With `retain_graph` the returned gradients
    /// keep their lineage and can be differentiated again; without it they
    /// are detached copies.
    pub fn backward(
        &mut self,
        output: NodeId,
        targets: &[NodeId],
        retain_graph: bool,
    ) -> Result<GradientMap> {
        if self.numel(output) != 1 {
            return Err(Error::NonScalarOutput {
                got: self.nodes[output.0].shape.clone(),
            });
        }
        let n0 = self.nodes.len();

        // ancestors of the output
        let mut above = vec![false; n0];
        above[output.0] = true;
        for id in (0..=output.0).rev() {
            if !above[id] {
                continue;
            }
            for inp in self.nodes[id].op.inputs().into_iter().flatten() {
                above[inp.0] = true;
            }
        }
        // nodes from which some target is reachable
        let mut below = vec![false; n0];
        for t in targets {
            below[t.0] = true;
        }
        for id in 0..n0 {
            if below[id] {
                continue;
            }
            below[id] = self.nodes[id]
                .op
                .inputs()
                .into_iter()
                .flatten()
                .any(|inp| below[inp.0]);
        }
        let needed = |id: NodeId, above: &[bool], below: &[bool]| above[id.0] && below[id.0];

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n0];
        if needed(output, &above, &below) {
            let one = Tensor::new(self.nodes[output.0].shape.clone(), vec![1.0])?;
            adjoint[output.0] = Some(self.leaf(&one, false));
        }

        for id in (0..n0).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            let this = NodeId(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut adjoint, &above, &below, a, g)?;
                    self.accum(&mut adjoint, &above, &below, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adjoint, &above, &below, a, g)?;
                    if above[b.0] && below[b.0] {
                        let ng = self.neg(g);
                        self.accum(&mut adjoint, &above, &below, b, ng)?;
                    }
                }
                Op::Mul(a, b) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.mul(g, b)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                    if above[b.0] && below[b.0] {
                        let gb = self.mul(g, a)?;
                        self.accum(&mut adjoint, &above, &below, b, gb)?;
                    }
                }
                Op::Div(a, b) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.div(g, b)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                    if above[b.0] && below[b.0] {
                        let y_over_b = self.div(this, b)?;
                        let gb = self.mul(g, y_over_b)?;
                        let gb = self.neg(gb);
                        self.accum(&mut adjoint, &above, &below, b, gb)?;
                    }
                }
                Op::Neg(a) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.neg(g);
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::AddScalar(a, _) => {
                    self.accum(&mut adjoint, &above, &below, a, g)?;
                }
                Op::MulScalar(a, c) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.mul_scalar(g, c);
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Square(a) => {
                    if above[a.0] && below[a.0] {
                        let two_a = self.mul_scalar(a, 2.0);
                        let ga = self.mul(g, two_a)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Tanh(a) => {
                    if above[a.0] && below[a.0] {
                        let y2 = self.square(this);
                        let ny2 = self.neg(y2);
                        let sech2 = self.add_scalar(ny2, 1.0);
                        let ga = self.mul(g, sech2)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Exp(a) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.mul(g, this)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Ln(a) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.div(g, a)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Abs(a) => {
                    if above[a.0] && below[a.0] {
                        let sign: Vec<f64> = self.nodes[a.0]
                            .values
                            .iter()
                            .map(|&x| {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let ga = self.mul_const(g, Arc::new(sign))?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::MinScalar(a, c) => {
                    if above[a.0] && below[a.0] {
                        let mask: Vec<f64> = self.nodes[a.0]
                            .values
                            .iter()
                            .map(|&x| if x <= c { 1.0 } else { 0.0 })
                            .collect();
                        let ga = self.mul_const(g, Arc::new(mask))?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::MaxScalar(a, c) => {
                    if above[a.0] && below[a.0] {
                        let mask: Vec<f64> = self.nodes[a.0]
                            .values
                            .iter()
                            .map(|&x| if x >= c { 1.0 } else { 0.0 })
                            .collect();
                        let ga = self.mul_const(g, Arc::new(mask))?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if above[a.0] && below[a.0] {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                    if above[b.0] && below[b.0] {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accum(&mut adjoint, &above, &below, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.transpose(g)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Reshape(a) => {
                    if above[a.0] && below[a.0] {
                        let shape = self.nodes[a.0].shape.clone();
                        let ga = self.reshape(g, shape)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::Gather(a, plan) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.scatter_add(g, plan)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::ScatterAdd(a, plan) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.gather(g, plan)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::MulConst(a, factor) => {
                    if above[a.0] && below[a.0] {
                        let ga = self.mul_const(g, factor)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
                Op::SumAll(a) => {
                    if above[a.0] && below[a.0] {
                        let shape = self.nodes[a.0].shape.clone();
                        let ga = self.broadcast_scalar(g, &shape)?;
                        self.accum(&mut adjoint, &above, &below, a, ga)?;
                    }
                }
            }
        }

        let mut grads = HashMap::with_capacity(targets.len());
        let mut unreachable = Vec::new();
        for &t in targets {
            let gid = match adjoint[t.0] {
                Some(g) if retain_graph => g,
                Some(g) => {
                    let detached = self.tensor(g);
                    self.leaf(&detached, false)
                }
                None => {
                    unreachable.push(t);
                    let zeros = Tensor::zeros(self.nodes[t.0].shape.clone());
                    self.leaf(&zeros, false)
                }
            };
            grads.insert(t, gid);
        }
        Ok(GradientMap { grads, unreachable })
    }

    fn accum(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        above: &[bool],
        below: &[bool],
        target: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        if !(above[target.0] && below[target.0]) {
            return Ok(());
        }
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }
}

/// Compare the analytic gradient of a scalar-valued graph function against
/// central finite differences at `point`.
///
/// Returns the max over coordinates of
/// `|analytic - central| / (|central| + 1e-10)`.
pub fn finite_difference_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "finite_difference_check",
            detail: "step must be positive".into(),
        });
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::new(point.shape.clone(), data.to_vec())?;
        let x = g.leaf(&t, true);
        let out = build(&mut g, x)?;
        if g.numel(out) != 1 {
            return Err(Error::NonScalarOutput {
                got: g.shape(out).to_vec(),
            });
        }
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference_check function value".into(),
            });
        }
        Ok(v)
    };

    // analytic gradient at the point
    let mut g = Graph::new();
    let x = g.leaf(point, true);
    let out = build(&mut g, x)?;
    if g.numel(out) != 1 {
        return Err(Error::NonScalarOutput {
            got: g.shape(out).to_vec(),
        });
    }
    if !g.scalar_value(out).is_finite() {
        return Err(Error::NonFinite {
            context: "finite_difference_check function value".into(),
        });
    }
    let gm = g.backward(out, &[x], false)?;
    let analytic = g.values(gm.grad(x).expect("target gradient")).to_vec();

    let mut max_err = 0.0f64;
    let base = point.data.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let err = (analytic[i] - central).abs() / (central.abs() + 1e-10);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vec1(g: &mut Graph, v: &[f64], rg: bool) -> NodeId {
        let t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        g.leaf(&t, rg)
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0], false);
        let b = vec1(&mut g, &[3.0, 4.0], false);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.values(c), &[4.0, 6.0]);
    }

    #[test]
    fn tanh_at_origin() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[0.0], false);
        let t = g.tanh(a);
        assert_eq!(g.values(t), &[0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0], false);
        let b = vec1(&mut g, &[1.0, 2.0, 3.0], false);
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn near_zero_divisor_rejected_unless_guarded() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0], false);
        let b = vec1(&mut g, &[1e-13], false);
        assert!(matches!(g.div(a, b), Err(Error::DivisorNearZero { .. })));
        let c = g.div_eps(a, b, 1e-12).unwrap();
        assert!((g.values(c)[0] - 1.0 / (1e-13 + 1e-12)).abs() < 1e-9);
    }

    #[test]
    fn conv1d_valid_width3_ones_kernel_sums_windows() {
        // hand convolution of [1,2,3,4,5] with an all-ones width-3 kernel
        let mut g = Graph::new();
        let x = Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let x = g.leaf(&x, false);
        let k = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let k = g.leaf(&k, false);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = g.leaf(&b, false);
        let y = g.conv1d(x, k, b, 3, ConvPad::Valid).unwrap();
        assert_eq!(g.shape(y), &[3, 1]);
        assert_eq!(g.values(y), &[6.0, 9.0, 12.0]);
    }

    #[test]
    fn conv1d_same_keeps_length() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let x = g.leaf(&x, false);
        let k = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let k = g.leaf(&k, false);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = g.leaf(&b, false);
        let y = g.conv1d(x, k, b, 3, ConvPad::Same).unwrap();
        assert_eq!(g.shape(y), &[5, 1]);
        // boundary windows read zeros
        assert_eq!(g.values(y), &[3.0, 6.0, 9.0, 12.0, 9.0]);
    }

    #[test]
    fn backward_square() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut g = Graph::new();
        let x = vec1(&mut g, &[3.0], true);
        let y = g.square(x);
        let gm = g.backward(y, &[x], false).unwrap();
        assert_eq!(g.values(gm.grad(x).unwrap()), &[6.0]);
    }

    #[test]
    fn double_backward_cube() {
        // f(x) = x^3 at x = 2 -> d2f/dx2 = 12
        let mut g = Graph::new();
        let x = vec1(&mut g, &[2.0], true);
        let x2 = g.square(x);
        let y = g.mul(x2, x).unwrap();
        let gm = g.backward(y, &[x], true).unwrap();
        let dy = gm.grad(x).unwrap();
        assert_eq!(g.values(dy), &[12.0]); // 3x^2
        let gm2 = g.backward(dy, &[x], false).unwrap();
        assert_eq!(g.values(gm2.grad(x).unwrap()), &[12.0]); // 6x
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0, 2.0], true);
        let y = g.square(x);
        assert!(matches!(
            g.backward(y, &[x], false),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn unreachable_target_gets_zeros_and_flag() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0], true);
        let z = vec1(&mut g, &[5.0, 6.0], true);
        let y = g.square(x);
        let gm = g.backward(y, &[x, z], false).unwrap();
        assert_eq!(gm.unreachable, vec![z]);
        assert_eq!(g.values(gm.grad(z).unwrap()), &[0.0, 0.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[-2.0, 0.0, 3.0], true);
        let a = g.abs(x);
        let s = g.sum_all(a);
        let gm = g.backward(s, &[x], false).unwrap();
        assert_eq!(g.values(gm.grad(x).unwrap()), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn max_axis_tie_breaks_lowest_index() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[2.0, 5.0, 5.0, 1.0], true);
        let (m, arg) = g.max_axis(x, 0).unwrap();
        assert_eq!(g.values(m), &[5.0]);
        assert_eq!(arg, vec![1]);
        let gm = g.backward(m, &[x], false).unwrap();
        assert_eq!(g.values(gm.grad(x).unwrap()), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_matches_direct() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0, 2.0, 3.0], false);
        let p = g.softmax(x).unwrap();
        let total: f64 = g.values(p).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for (a, b) in g.values(p).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let point = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum_all(s))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn fd_check_constant_function() {
        let point = Tensor::new(vec![2], vec![0.4, -0.3]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let z = g.mul_scalar(x, 0.0);
                Ok(g.sum_all(z))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_l1_norm_away_from_zero() {
        let point = Tensor::new(vec![3], vec![0.7, -1.2, 2.5]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let a = g.abs(x);
                Ok(g.sum_all(a))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn fd_check_rejects_non_finite() {
        let point = Tensor::new(vec![1], vec![100.0]).unwrap();
        let res = finite_difference_check(
            |g, x| {
                let e = g.exp(x); // exp(100) is finite
                let e2 = g.mul(e, e)?; // exp(200)
                let e4 = g.mul(e2, e2)?; // exp(400), overflow
                Ok(g.sum_all(e4))
            },
            &point,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    /// Three-layer tanh network used by the gradient-correctness checks.
    fn tanh_net(g: &mut Graph, x: NodeId, params: &[NodeId; 3]) -> Result<NodeId> {
        let h1 = g.matmul(x, params[0])?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, params[1])?;
        let h2 = g.tanh(h2);
        let h3 = g.matmul(h2, params[2])?;
        let h3 = g.tanh(h3);
        Ok(g.sum_all(h3))
    }

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tanh_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let x = random_tensor(&mut rng, vec![2, 4]);
            let w1 = random_tensor(&mut rng, vec![4, 5]);
            let w2 = random_tensor(&mut rng, vec![5, 3]);
            let w3 = random_tensor(&mut rng, vec![3, 2]);
            for target in 0..3 {
                let tensors = [w1.clone(), w2.clone(), w3.clone()];
                let point = tensors[target].clone();
                let x = x.clone();
                let build = move |g: &mut Graph, p: NodeId| {
                    let xin = g.leaf(&x, false);
                    let mut ids = [p; 3];
                    for (i, t) in tensors.iter().enumerate() {
                        if i != target {
                            ids[i] = g.leaf(t, true);
                        }
                    }
                    tanh_net(g, xin, &ids)
                };
                let err = finite_difference_check(build, &point, 1e-5).unwrap();
                assert!(err < 1e-4, "param {target} error {err}");
            }
        }
    }

    #[test]
    fn double_backward_matches_finite_differences_of_grad_norm() {
        // L(theta) = (||df/dx||_1)^2 for f = sum tanh(x W); check dL/dW by
        // finite differences over W.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, vec![1, 4]);
        let w = random_tensor(&mut rng, vec![4, 3]);

        let build = {
            let x = x.clone();
            move |g: &mut Graph, wid: NodeId| {
                let xin = g.leaf(&x, true);
                let h = g.matmul(xin, wid)?;
                let h = g.tanh(h);
                let f = g.sum_all(h);
                let gm = g.backward(f, &[xin], true)?;
                let dx = gm.grad(xin).unwrap();
                let a = g.abs(dx);
                let l1 = g.sum_all(a);
                Ok(g.square(l1))
            }
        };
        let err = finite_difference_check(build, &w, 1e-5).unwrap();
        assert!(err < 1e-3, "error {err}");
    }

    #[test]
    fn per_primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        type Build = fn(&mut Graph, NodeId) -> Result<NodeId>;
        let cases: Vec<(&str, Build)> = vec![
            ("tanh", |g, x| {
                let y = g.tanh(x);
                Ok(g.sum_all(y))
            }),
            ("exp", |g, x| {
                let y = g.exp(x);
                Ok(g.sum_all(y))
            }),
            ("square", |g, x| {
                let y = g.square(x);
                Ok(g.sum_all(y))
            }),
            ("mul_self", |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum_all(y))
            }),
            ("softmax_pick", |g, x| {
                let p = g.softmax(x)?;
                let plan = Arc::new(IndexPlan::select_elements(g.numel(p), &[0]));
                let plan = Arc::new(IndexPlan {
                    src_shape: g.shape(p).to_vec(),
                    dst_shape: plan.dst_shape.clone(),
                    indices: plan.indices.clone(),
                });
                g.gather(p, plan)
            }),
            ("min_scalar", |g, x| {
                let y = g.min_scalar(x, 0.25);
                let y = g.square(y);
                Ok(g.sum_all(y))
            }),
            ("max_scalar", |g, x| {
                let y = g.max_scalar(x, -0.25);
                let y = g.square(y);
                Ok(g.sum_all(y))
            }),
            ("abs", |g, x| {
                let y = g.abs(x);
                Ok(g.sum_all(y))
            }),
            ("ln_shifted", |g, x| {
                let y = g.square(x);
                let y = g.add_scalar(y, 1.0);
                let y = g.ln(y)?;
                Ok(g.sum_all(y))
            }),
            ("div", |g, x| {
                let d = g.square(x);
                let d = g.add_scalar(d, 2.0);
                let y = g.div(x, d)?;
                Ok(g.sum_all(y))
            }),
            ("max_axis", |g, x| {
                let (m, _) = g.max_axis(x, 0)?;
                Ok(g.sum_all(m))
            }),
        ];
        for (name, build) in cases {
            for trial in 0..5 {
                // keep away from non-smooth points: |x| > 1e-3 and distinct
                let data: Vec<f64> = (0..6)
                    .map(|i| {
                        let mag = rng.random_range(0.05..0.9) + i as f64 * 1e-3;
                        if rng.random_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                let point = Tensor::new(vec![6], data).unwrap();
                let err = finite_difference_check(build, &point, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name} trial {trial}: error {err}");
            }
        }
    }

    #[test]
    fn matmul_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![6, 3]);
        let k = random_tensor(&mut rng, vec![9, 2]);
        let b = random_tensor(&mut rng, vec![2]);
        for pad in [ConvPad::Same, ConvPad::Valid] {
            // gradient with respect to the kernel
            let (x2, b2) = (x.clone(), b.clone());
            let err = finite_difference_check(
                move |g, kid| {
                    let xin = g.leaf(&x2, false);
                    let bin = g.leaf(&b2, true);
                    let y = g.conv1d(xin, kid, bin, 3, pad)?;
                    let y = g.tanh(y);
                    Ok(g.sum_all(y))
                },
                &k,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "conv kernel ({pad:?}): {err}");
            // gradient with respect to the input
            let (k2, b2) = (k.clone(), b.clone());
            let err = finite_difference_check(
                move |g, xid| {
                    let kin = g.leaf(&k2, true);
                    let bin = g.leaf(&b2, true);
                    let y = g.conv1d(xid, kin, bin, 3, pad)?;
                    let y = g.tanh(y);
                    Ok(g.sum_all(y))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "conv input ({pad:?}): {err}");
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = random_tensor(&mut rng, vec![2, 4]);
            let w = random_tensor(&mut rng, vec![4, 4]);
            let mut g = Graph::new();
            let xid = g.leaf(&x, true);
            let wid = g.leaf(&w, true);
            let h = g.matmul(xid, wid).unwrap();
            let h = g.tanh(h);
            let s = g.sum_all(h);
            let gm = g.backward(s, &[xid, wid], false).unwrap();
            (
                g.scalar_value(s).to_bits(),
                g.values(gm.grad(xid).unwrap())
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                g.values(gm.grad(wid).unwrap())
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn retained_gradients_carry_lineage() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.5], true);
        let y = g.square(x);
        let retained = g.backward(y, &[x], true).unwrap();
        assert!(!g.is_leaf(retained.grad(x).unwrap()));
        let detached = g.backward(y, &[x], false).unwrap();
        assert!(g.is_leaf(detached.grad(x).unwrap()));
        assert_eq!(
            g.values(retained.grad(x).unwrap()),
            g.values(detached.grad(x).unwrap())
        );
    }

    #[test]
    fn sum_axis_and_mean_axis() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = g.leaf(&t, false);
        let rows = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.values(rows), &[6.0, 15.0]);
        let cols = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.values(cols), &[5.0, 7.0, 9.0]);
        let mean_rows = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.values(mean_rows), &[2.0, 5.0]);
    }
}
