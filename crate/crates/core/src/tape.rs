//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every forward op records (kind, input node ids, saved activations)
//! onto the graph; `backward` replays the tape in reverse and
//! accumulates vector-Jacobian products. Node inputs always reference
//! earlier nodes, so the tape is topologically sorted by construction.
//!
//! Masks are passed as plain tensors rather than graph nodes: they are
//! structural constants and never receive gradients.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`TapeGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Operation kind recorded per node. Payloads carry whatever the
/// backward pass needs beyond the input/output values themselves.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// out = c * x
    Scale(f64),
    /// out = x + c
    AddScalar(f64),
    Tanh,
    Exp,
    Relu,
    SoftmaxLastDim,
    MeanAll,
    /// Row-wise normalization over the last axis (no affine). Saves the
    /// per-row 1/sqrt(var + eps) for the backward pass.
    LayerNorm { inv_std: Vec<f64> },
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Transpose,
    /// out = mask == 1 ? x : fill. The mask is a constant, not a node.
    MaskedFill { mask: Tensor, fill: f64 },
    /// [n] -> [rows, n] by repetition.
    RowBroadcast { rows: usize },
    /// S[i,j] = sum_d v[d] * tanh(A[i,d] + B[j,d]); inputs (A, B, v).
    AdditiveScores,
}

struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// The computation record. Nodes are append-only; `backward` fills the
/// gradient slot of every node reachable from the loss.
pub struct TapeGraph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for TapeGraph {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl TapeGraph {
    pub fn new() -> Self {
        TapeGraph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        self.grads.push(None);
        id
    }

    fn record(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>, ctx: &'static str) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::numerics(ctx));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(self.push(op, inputs, Tensor::new(shape, data)?))
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape_of(id);
        if s.len() != 2 {
            return Err(CoreError::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(CoreError::shape("matmul", self.shape_of(a), self.shape_of(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(OpKind::MatMul, vec![a, b], vec![m, n], data, "matmul")
    }

    fn elementwise(&mut self, op: OpKind, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(CoreError::shape(name, self.shape_of(a), self.shape_of(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape_of(a).to_vec();
        self.record(op, vec![a, b], shape, data, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(OpKind::Add, a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(OpKind::Sub, a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(OpKind::Mul, a, b, |x, y| x * y, "mul")
    }

    fn unary(&mut self, op: OpKind, x: NodeId, f: impl Fn(f64) -> f64, name: &'static str) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape_of(x).to_vec();
        self.record(op, vec![x], shape, data, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::Scale(c), x, |v| c * v, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::AddScalar(c), x, |v| v + c, "add_scalar")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Tanh, x, f64::tanh, "tanh")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Exp, x, f64::exp, "exp")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Relu, x, |v| v.max(0.0), "relu")
    }

    /// Numerically stable softmax over the last axis. Rows sum to 1.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        if shape.is_empty() {
            return Err(CoreError::shape("softmax_lastdim", &shape, &[]));
        }
        let width = *shape.last().unwrap();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(width).zip(data.chunks_exact_mut(width)) {
            let max = row_in.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        self.record(OpKind::SoftmaxLastDim, vec![x], shape, data, "softmax_lastdim")
    }

    /// Mean over all elements; result is a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let mean = self.value(x).data().iter().sum::<f64>() / n;
        self.record(OpKind::MeanAll, vec![x], vec![], vec![mean], "mean_all")
    }

    /// Row-wise normalization: out = (x - mean) / sqrt(var + eps),
    /// computed over the last axis. No affine; rows of the output have
    /// mean 0 and unit variance up to eps.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        if shape.is_empty() {
            return Err(CoreError::shape("layer_norm", &shape, &[]));
        }
        let width = *shape.last().unwrap();
        let src = self.value(x).data();
        let rows = src.len() / width;
        let mut data = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, &v) in data[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        self.record(OpKind::LayerNorm { inv_std }, vec![x], shape, data, "layer_norm")
    }

    /// Stack rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_rows needs at least one input"));
        }
        let (_, cols) = self.rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != cols {
                return Err(CoreError::shape("concat_rows", self.shape_of(parts[0]), self.shape_of(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.record(OpKind::ConcatRows, parts.to_vec(), vec![rows, cols], data, "concat_rows")
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_cols needs at least one input"));
        }
        let (rows, _) = self.rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(CoreError::shape("concat_cols", self.shape_of(parts[0]), self.shape_of(p)));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.record(OpKind::ConcatCols, parts.to_vec(), vec![rows, cols], data, "concat_cols")
    }

    /// Rows [start, end) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.rank2(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(CoreError::contract(format!(
                "slice_rows [{start}, {end}) out of bounds for {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        self.record(OpKind::SliceRows { start, end }, vec![x], vec![end - start, cols], data, "slice_rows")
    }

    /// Columns [start, end) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.rank2(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(CoreError::contract(format!(
                "slice_cols [{start}, {end}) out of bounds for {cols} cols"
            )));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.record(OpKind::SliceCols { start, end }, vec![x], vec![rows, w], data, "slice_cols")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(x, "transpose")?;
        let data = transpose_raw(self.value(x).data(), m, n);
        self.record(OpKind::Transpose, vec![x], vec![n, m], data, "transpose")
    }

    /// Keep entries where the 0/1 `mask` is 1, replace the rest with
    /// `fill`. The mask is a constant of equal shape; its entries are
    /// validated to be exactly 0 or 1.
    pub fn masked_fill(&mut self, x: NodeId, mask: &Tensor, fill: f64) -> Result<NodeId> {
        if self.shape_of(x) != mask.shape() {
            return Err(CoreError::shape("masked_fill", self.shape_of(x), mask.shape()));
        }
        if !fill.is_finite() {
            return Err(CoreError::numerics("masked_fill fill value"));
        }
        if !mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(CoreError::contract("masked_fill mask must be 0/1"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m == 1.0 { v } else { fill })
            .collect();
        let shape = self.shape_of(x).to_vec();
        self.record(
            OpKind::MaskedFill { mask: mask.clone(), fill },
            vec![x],
            shape,
            data,
            "masked_fill",
        )
    }

    /// Repeat a rank-1 tensor of width n into a rows x n matrix.
    pub fn row_broadcast(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.shape_of(x);
        if s.len() != 1 {
            return Err(CoreError::shape("row_broadcast", s, &[]));
        }
        let n = s[0];
        if rows == 0 {
            return Err(CoreError::contract("row_broadcast needs rows >= 1"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        self.record(OpKind::RowBroadcast { rows }, vec![x], vec![rows, n], data, "row_broadcast")
    }

    /// Fused additive scoring: S[i,j] = sum_d v[d] * tanh(A[i,d] + B[j,d])
    /// for A: m x d, B: n x d, v: d.
    pub fn additive_scores(&mut self, a: NodeId, b: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, d) = self.rank2(a, "additive_scores")?;
        let (n, d2) = self.rank2(b, "additive_scores")?;
        if d != d2 {
            return Err(CoreError::shape("additive_scores", self.shape_of(a), self.shape_of(b)));
        }
        let vs = self.shape_of(v);
        if vs != [d] {
            return Err(CoreError::shape("additive_scores", vs, &[d]));
        }
        let (ad, bd, vd) = (self.value(a).data(), self.value(b).data(), self.value(v).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * d..(i + 1) * d];
            for j in 0..n {
                let brow = &bd[j * d..(j + 1) * d];
                let mut s = 0.0;
                for k in 0..d {
                    s += vd[k] * (arow[k] + brow[k]).tanh();
                }
                data[i * n + j] = s;
            }
        }
        self.record(OpKind::AdditiveScores, vec![a, b, v], vec![m, n], data, "additive_scores")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Gradients of all reachable
    /// nodes become queryable via [`TapeGraph::grad`]; unreachable
    /// nodes report zeros of matching shape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].clone() else {
                continue;
            };
            self.backward_node(idx, &gout);
        }

        // Forward values are finite by construction, but gradient
        // accumulation can still overflow; surface that as a numeric
        // failure instead of handing out a poisoned tensor.
        for g in self.grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(CoreError::numerics("backward accumulation"));
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `id`; zeros if
    /// no gradient flowed there.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient finiteness"),
            None => Tensor::zeros(shape),
        }
    }

    fn accum(&mut self, id: NodeId, delta: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, idx: usize, gout: &[f64]) {
        // Clone the per-node metadata we need so that accum can borrow
        // self mutably below.
        let inputs = self.nodes[idx].inputs.clone();
        let op = self.nodes[idx].op.clone();
        match op {
            OpKind::Leaf => {}
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.shape_of(a)[0], self.shape_of(a)[1]);
                let n = self.shape_of(b)[1];
                let bt = transpose_raw(self.value(b).data(), k, n);
                let da = matmul_raw(gout, &bt, m, n, k);
                let at = transpose_raw(self.value(a).data(), m, k);
                let db = matmul_raw(&at, gout, k, m, n);
                self.accum(a, &da);
                self.accum(b, &db);
            }
            OpKind::Add => {
                self.accum(inputs[0], gout);
                self.accum(inputs[1], gout);
            }
            OpKind::Sub => {
                self.accum(inputs[0], gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accum(inputs[1], &neg);
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da: Vec<f64> = gout.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            OpKind::Scale(c) => {
                let dx: Vec<f64> = gout.iter().map(|g| c * g).collect();
                self.accum(inputs[0], &dx);
            }
            OpKind::AddScalar(_) => self.accum(inputs[0], gout),
            OpKind::Tanh => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<f64> = gout.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accum(inputs[0], &dx);
            }
            OpKind::Exp => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<f64> = gout.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accum(inputs[0], &dx);
            }
            OpKind::Relu => {
                let x = self.value(inputs[0]).data();
                let dx: Vec<f64> = gout.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.accum(inputs[0], &dx);
            }
            OpKind::SoftmaxLastDim => {
                let y = self.nodes[idx].value.data();
                let width = *self.nodes[idx].value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / width {
                    let yr = &y[r * width..(r + 1) * width];
                    let gr = &gout[r * width..(r + 1) * width];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accum(inputs[0], &dx);
            }
            OpKind::MeanAll => {
                let n = self.value(inputs[0]).numel();
                let g = gout[0] / n as f64;
                let dx = vec![g; n];
                self.accum(inputs[0], &dx);
            }
            OpKind::LayerNorm { inv_std } => {
                let y = self.nodes[idx].value.data();
                let width = *self.nodes[idx].value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = &y[r * width..(r + 1) * width];
                    let gr = &gout[r * width..(r + 1) * width];
                    let gmean = gr.iter().sum::<f64>() / width as f64;
                    let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for ((o, &yv), &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(yr).zip(gr) {
                        *o = is * (gv - gmean - yv * gy);
                    }
                }
                self.accum(inputs[0], &dx);
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for &p in &inputs {
                    let len = self.value(p).numel();
                    let slice = gout[offset..offset + len].to_vec();
                    self.accum(p, &slice);
                    offset += len;
                }
            }
            OpKind::ConcatCols => {
                let rows = self.nodes[idx].value.shape()[0];
                let cols = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for &p in &inputs {
                    let w = self.shape_of(p)[1];
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w].copy_from_slice(&gout[r * cols + offset..r * cols + offset + w]);
                    }
                    self.accum(p, &dp);
                    offset += w;
                }
            }
            OpKind::SliceRows { start, .. } => {
                let x = inputs[0];
                let (rows, cols) = (self.shape_of(x)[0], self.shape_of(x)[1]);
                let mut dx = vec![0.0; rows * cols];
                dx[start * cols..start * cols + gout.len()].copy_from_slice(gout);
                self.accum(x, &dx);
            }
            OpKind::SliceCols { start, end } => {
                let x = inputs[0];
                let (rows, cols) = (self.shape_of(x)[0], self.shape_of(x)[1]);
                let w = end - start;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + end].copy_from_slice(&gout[r * w..(r + 1) * w]);
                }
                self.accum(x, &dx);
            }
            OpKind::Transpose => {
                let (n, m) = (self.nodes[idx].value.shape()[0], self.nodes[idx].value.shape()[1]);
                let dx = transpose_raw(gout, n, m);
                self.accum(inputs[0], &dx);
            }
            OpKind::MaskedFill { mask, .. } => {
                let dx: Vec<f64> = gout.iter().zip(mask.data()).map(|(g, &m)| g * m).collect();
                self.accum(inputs[0], &dx);
            }
            OpKind::RowBroadcast { rows } => {
                let n = self.value(inputs[0]).numel();
                let mut dx = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        dx[j] += gout[r * n + j];
                    }
                }
                self.accum(inputs[0], &dx);
            }
            OpKind::AdditiveScores => {
                let (a, b, v) = (inputs[0], inputs[1], inputs[2]);
                let (m, d) = (self.shape_of(a)[0], self.shape_of(a)[1]);
                let n = self.shape_of(b)[0];
                let (ad, bd, vd) = (
                    self.value(a).data().to_vec(),
                    self.value(b).data().to_vec(),
                    self.value(v).data().to_vec(),
                );
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                let mut dv = vec![0.0; d];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout[i * n + j];
                        for k in 0..d {
                            let t = (ad[i * d + k] + bd[j * d + k]).tanh();
                            let u = g * vd[k] * (1.0 - t * t);
                            da[i * d + k] += u;
                            db[j * d + k] += u;
                            dv[k] += g * t;
                        }
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
                self.accum(v, &dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2, 3], &[5.0, -3.0, 0.2, 100.0, 99.0, 98.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_all_of_ones_is_one() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2, 2], &[1.0; 4]));
        let y = g.mean_all(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 1.0);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = TapeGraph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = TapeGraph::new();
        let a = g.leaf(t(&[2, 3], &[0.0; 6]));
        let b = g.leaf(t(&[2, 2], &[0.0; 4]));
        match g.matmul(a, b).unwrap_err() {
            CoreError::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn mean_all_backward_is_uniform() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[0.25; 4]);
    }

    #[test]
    fn tanh_backward_hand_value() {
        // d tanh(x)/dx at 0.5 = 1 - tanh(0.5)^2 = 0.7864477329659274
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[], &[0.5]));
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x).data()[0] - 0.7864477329659274).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[3], &[9.0, 9.0, 9.0]));
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(CoreError::Contract(_))));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.0, 0.5]));
        let y = g.layer_norm(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps-limited
        }
    }

    #[test]
    fn masked_fill_keeps_and_replaces() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = g.masked_fill(x, &mask, -1e30).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1e30, -1e30, 4.0]);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[0.25, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn masked_softmax_assigns_exact_zero() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[1, 3], &[2.0, 5.0, -1.0]));
        let mask = t(&[1, 3], &[1.0, 0.0, 1.0]);
        let m = g.masked_fill(x, &mask, -1e30).unwrap();
        let y = g.softmax_lastdim(m).unwrap();
        assert_eq!(g.value(y).data()[1], 0.0);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data()[1], 0.0);
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut g = TapeGraph::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = g.slice_rows(x, 0, 1).unwrap();
        let b = g.slice_rows(x, 1, 3).unwrap();
        let back = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let loss = g.mean_all(back).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0 / 6.0; 6]);
    }

    #[test]
    fn additive_scores_matches_direct_loop() {
        let mut g = TapeGraph::new();
        let a = g.leaf(t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]));
        let b = g.leaf(t(&[2, 2], &[0.5, 0.4, -0.6, 0.9]));
        let v = g.leaf(t(&[2], &[1.0, -2.0]));
        let s = g.additive_scores(a, b, v).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..2)
                    .map(|k| g.value(v).data()[k] * (g.value(a).at(i, k) + g.value(b).at(j, k)).tanh())
                    .sum();
                assert!((g.value(s).at(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut g = TapeGraph::new();
            let x = g.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
            let h = g.tanh(x).unwrap();
            let s = g.softmax_lastdim(h).unwrap();
            let l = g.mean_all(s).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().unwrap(), g.grad(x).data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
