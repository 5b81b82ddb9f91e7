//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Each node records the
//! operation that produced it, the ids of its parents and the forward value.
//! Ids only ever reference earlier nodes, so the graph is acyclic by
//! construction and the node order is already topological: the backward pass
//! walks the arena once in reverse, accumulating vector-Jacobian products by
//! sum over all paths.
//!
//! Values are computed eagerly when an op is recorded, so shape and domain
//! errors surface at the call site. A tape is built, run backward once, read
//! and dropped; parameters persist outside the tape and are re-registered
//! each step.

use crate::tensor::{matmul_raw, transpose_raw};
use crate::{Error, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance epsilon for layer normalization.
pub const LAYERNORM_EPS: f32 = 1e-5;

const GELU_COEF: f32 = 0.044715;
const SQRT_2_OVER_PI: f32 = 0.797_884_6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// Multiply every element of `x` by the scalar node `s`.
    ScaleBy { x: NodeId, s: NodeId },
    Exp(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    L2Normalize(NodeId),
    Matmul(NodeId, NodeId),
    GatherRows { table: NodeId, ids: Vec<usize> },
    BroadcastRow { v: NodeId, n: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert tape: records ops forward, replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    ran_backward: bool,
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

    /// Register a constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Register a trainable leaf (receives a gradient).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    fn push_op(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.nodes[x.0].value.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push_op(Op::Scale(x, c), value, &[x])
    }

    /// Multiply `x` elementwise by the scalar-valued node `s`, differentiable
    /// in both arguments.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Domain {
                op: "scale_by",
                msg: format!("scale must be scalar, got shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].value.item();
        let data = self.nodes[x.0].value.data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(Op::ScaleBy { x, s }, value, &[x, s]))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].value.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push_op(Op::Exp(x), value, &[x])
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(v) = self.nodes[x.0].value.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("requires positive inputs, found {v}"),
            });
        }
        let data = self.nodes[x.0].value.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(Op::Log(x), value, &[x]))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu_forward(v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push_op(Op::Gelu(x), value, &[x])
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::Domain {
                op: "transpose",
                msg: format!("requires rank 2, got shape {:?}", t.shape()),
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let value = Tensor::new(vec![c, r], transpose_raw(t.data(), r, c))?;
        Ok(self.push_op(Op::Transpose(x), value, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push_op(Op::Reshape(x), value, &[x]))
    }

    /// Concatenate two rank-2 tensors along the last dimension.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
            return Err(self.dim_err("concat_cols", a, b));
        }
        let (rows, wa, wb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&tb.data()[r * wb..(r + 1) * wb]);
        }
        let value = Tensor::new(vec![rows, wa + wb], data)?;
        Ok(self.push_op(Op::ConcatCols(a, b), value, &[a, b]))
    }

    /// Stack rank-2 tensors with equal widths along the row dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Domain {
            op: "concat_rows",
            msg: "needs at least one part".into(),
        })?;
        let cols = {
            let t = &self.nodes[first.0].value;
            if t.rank() != 2 {
                return Err(Error::Domain {
                    op: "concat_rows",
                    msg: format!("requires rank 2, got shape {:?}", t.shape()),
                });
            }
            t.cols()
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 2 || t.cols() != cols {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Contiguous row range `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || len == 0 || start + len > t.rows() {
            return Err(Error::Domain {
                op: "slice_rows",
                msg: format!(
                    "range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    t.shape()
                ),
            });
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.push_op(Op::SliceRows { x, start }, value, &[x]))
    }

    /// Contiguous column range `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || len == 0 || start + len > t.cols() {
            return Err(Error::Domain {
                op: "slice_cols",
                msg: format!(
                    "range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    t.shape()
                ),
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push_op(Op::SliceCols { x, start }, value, &[x]))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        self.push_op(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let s: f32 = t.data().iter().sum::<f32>() / t.numel() as f32;
        self.push_op(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    // ── Row-wise ops (last dimension) ───────────────────────────────────

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.require_rows("softmax", x)?;
        let (rows, cols) = (t.lead_dims(), t.last_dim());
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut denom = 0.0f32;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Softmax(x), value, &[x]))
    }

    /// Log-softmax over the last dimension, computed with max subtraction.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.require_rows("log_softmax", x)?;
        let (rows, cols) = (t.lead_dims(), t.last_dim());
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::LogSoftmax(x), value, &[x]))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let t = self.require_rows("layernorm", x)?;
        let (rows, cols) = (t.lead_dims(), t.last_dim());
        for &aff in &[gain, bias] {
            let a = &self.nodes[aff.0].value;
            if a.shape() != [cols] {
                return Err(self.dim_err("layernorm", x, aff));
            }
        }
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let t = &self.nodes[x.0].value;
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let (mu, var) = row_mean_var(row);
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mu) * inv * g[c] + b[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::LayerNorm { x, gain, bias }, value, &[x, gain, bias]))
    }

    /// Scale every row of the last dimension to unit Euclidean norm.
    /// A row with zero norm is a domain error rather than an arbitrary
    /// direction.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.require_rows("l2_normalize", x)?;
        let (rows, cols) = (t.lead_dims(), t.last_dim());
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let sumsq: f32 = row.iter().map(|v| v * v).sum();
            if sumsq == 0.0 {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    msg: format!("row {r} has zero norm"),
                });
            }
            let inv = 1.0 / sumsq.sqrt();
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::L2Normalize(x), value, &[x]))
    }

    fn require_rows(&self, op: &'static str, x: NodeId) -> Result<&Tensor> {
        let t = &self.nodes[x.0].value;
        if t.rank() == 0 {
            return Err(Error::Domain {
                op,
                msg: "requires rank >= 1".into(),
            });
        }
        Ok(t)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(self.dim_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let value = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push_op(Op::Matmul(a, b), value, &[a, b]))
    }

    /// Look up rows of `table` by index; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::Domain {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows: empty index list".into()));
        }
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "gather_rows: index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push_op(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        ))
    }

    /// Repeat a rank-1 vector as `n` identical rows; the backward pass sums
    /// over rows.
    pub fn broadcast_row(&mut self, v: NodeId, n: usize) -> Result<NodeId> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 1 || n == 0 {
            return Err(Error::Domain {
                op: "broadcast_row",
                msg: format!("needs rank-1 vector and n >= 1, got {:?} x {n}", t.shape()),
            });
        }
        let w = t.numel();
        let mut data = Vec::with_capacity(n * w);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![n, w], data)?;
        Ok(self.push_op(Op::BroadcastRow { v, n }, value, &[v]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate by sum over
    /// all paths; repeated runs on one tape are rejected.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.ran_backward = true;
        self.grads[root.0] = Some(Tensor::new(
            self.nodes[root.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad_data: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad_data) {
                    *e += g;
                }
            }
            None => {
                let t = Tensor::new(self.nodes[id.0].value.shape().to_vec(), grad_data.to_vec())
                    .expect("grad shape matches value shape");
                self.grads[id.0] = Some(t);
            }
        }
    }

    fn propagate(&mut self, op: &Op, out: usize, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.data());
                self.accumulate(b, g.data());
            }
            Op::Mul(a, b) => {
                let da: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f32> = g.data().iter().map(|gv| gv * c).collect();
                self.accumulate(x, &dx);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value.item();
                let dx: Vec<f32> = g.data().iter().map(|gv| gv * sv).collect();
                let ds: f32 = g
                    .data()
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, xv)| gv * xv)
                    .sum();
                self.accumulate(x, &dx);
                self.accumulate(s, &[ds]);
            }
            Op::Exp(x) => {
                let dx: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(self.nodes[out].value.data())
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Transpose(x) => {
                let t = &self.nodes[out].value;
                let dx = transpose_raw(g.data(), t.rows(), t.cols());
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(x, g.data());
            }
            Op::ConcatCols(a, b) => {
                let (wa, wb) = (
                    self.nodes[a.0].value.cols(),
                    self.nodes[b.0].value.cols(),
                );
                let rows = self.nodes[a.0].value.rows();
                let w = wa + wb;
                let mut da = vec![0.0f32; rows * wa];
                let mut db = vec![0.0f32; rows * wb];
                for r in 0..rows {
                    da[r * wa..(r + 1) * wa].copy_from_slice(&g.data()[r * w..r * w + wa]);
                    db[r * wb..(r + 1) * wb].copy_from_slice(&g.data()[r * w + wa..(r + 1) * w]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let dp = g.data()[offset..offset + n].to_vec();
                    self.accumulate(p, &dp);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.nodes[x.0].value.cols();
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                dx[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                self.accumulate(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let len = self.nodes[out].value.cols();
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(x, &dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let dx = vec![gv; self.nodes[x.0].value.numel()];
                self.accumulate(x, &dx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let gv = g.item() / n as f32;
                let dx = vec![gv; n];
                self.accumulate(x, &dx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[out].value;
                let (rows, cols) = (y.lead_dims(), y.last_dim());
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[out].value;
                let (rows, cols) = (y.lead_dims(), y.last_dim());
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let gsum: f32 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let t = &self.nodes[x.0].value;
                let (rows, cols) = (t.lead_dims(), t.last_dim());
                let gv = self.nodes[gain.0].value.data().to_vec();
                let mut dx = vec![0.0f32; rows * cols];
                let mut dgain = vec![0.0f32; cols];
                let mut dbias = vec![0.0f32; cols];
                for r in 0..rows {
                    let row = &t.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let (mu, var) = row_mean_var(row);
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    // xhat = (x - mu) * inv; d = g .* gain
                    let mut d_mean = 0.0f32;
                    let mut dxhat_dot = 0.0f32;
                    for c in 0..cols {
                        let xhat = (row[c] - mu) * inv;
                        let d = gr[c] * gv[c];
                        d_mean += d;
                        dxhat_dot += d * xhat;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                    }
                    d_mean /= cols as f32;
                    dxhat_dot /= cols as f32;
                    for c in 0..cols {
                        let xhat = (row[c] - mu) * inv;
                        let d = gr[c] * gv[c];
                        dx[r * cols + c] = inv * (d - d_mean - xhat * dxhat_dot);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::L2Normalize(x) => {
                let t = &self.nodes[x.0].value;
                let y = &self.nodes[out].value;
                let (rows, cols) = (t.lead_dims(), t.last_dim());
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let xr = &t.data()[r * cols..(r + 1) * cols];
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt();
                    let dot: f32 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G * B^T, dB = A^T * G
                let bt = transpose_raw(tb.data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::GatherRows { table, ref ids } => {
                let cols = self.nodes[table.0].value.cols();
                let mut dt = vec![0.0f32; self.nodes[table.0].value.numel()];
                for (row, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += g.data()[row * cols + c];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::BroadcastRow { v, n } => {
                let w = self.nodes[v.0].value.numel();
                let mut dv = vec![0.0f32; w];
                for r in 0..n {
                    for c in 0..w {
                        dv[c] += g.data()[r * w + c];
                    }
                }
                self.accumulate(v, &dv);
            }
        }
    }
}

fn row_mean_var(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mu = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / n;
    (mu, var)
}

fn gelu_forward(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
