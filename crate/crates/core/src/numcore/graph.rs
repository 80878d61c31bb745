//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node in an append-only arena. Because a node can only reference nodes that
//! were created before it, the recorded graph is acyclic by construction and
//! reverse creation order is a valid topological order for the backward pass.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, softmax_in_place, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `a * b` or `a * b^T`.
    MatMul { a: NodeId, b: NodeId, b_t: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `[cols]` bias to every row.
    AddRow { x: NodeId, bias: NodeId },
    /// Scales row `i` of `x` by `s[i]`, `s` of shape `[rows, 1]`.
    MulCol { x: NodeId, s: NodeId },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    GatherRows { x: NodeId, index: Vec<usize> },
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    FocalLoss { logits: NodeId, targets: Vec<bool>, mask: Vec<bool>, alpha: f64, gamma: f64, norm: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Tensor>>,
}

const LOG_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, false, "constant")
    }

    /// A free input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, true, "variable")
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(n);
        }
        let n = self.push(store.get(id).clone(), Op::Param(id), true, "param")?;
        self.param_nodes.insert(id, n);
        Ok(n)
    }

    fn mat_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t: false }, rg, "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t: true }, rg, "matmul_nt")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols || self.value(bias).rank() > 2 {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::AddRow { x, bias }, rg, "add_row")
    }

    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let rows = self.value(x).rows();
        if self.value(s).len() != rows {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", self.shape(x), self.shape(s))));
        }
        let mut value = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (r, &k) in sv.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= k;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulCol { x, s }, rg, "mul_col")
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, k), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v + k);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg, "add_scalar")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg, "leaky_relu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let mut value = self.value(x).clone();
        if value.cols() > 0 {
            for r in 0..value.rows() {
                softmax_in_place(value.row_mut(r));
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg, "softmax")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).cols();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// Concatenation along the last axis of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", format!("row mismatch at shape {:?}", v.shape())));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}..{} of {cols}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", format!("column mismatch at shape {:?}", v.shape())));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![index.len(), cols], out)?,
            Op::GatherRows { x, index: index.to_vec() },
            rg,
            "gather_rows",
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(x).sum() / n as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg, "mean")
    }

    /// Sigmoid focal loss over a logit matrix.
    ///
    /// Cells with `mask == false` contribute nothing. The summed loss is
    /// divided by `max(1, number of unmasked positive cells)`.
    pub fn focal_loss(&mut self, logits: NodeId, targets: &[bool], mask: &[bool], alpha: f64, gamma: f64) -> Result<NodeId> {
        let n = self.value(logits).len();
        if targets.len() != n || mask.len() != n {
            return Err(shape_err(
                "focal_loss",
                format!("{n} logits, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let positives = targets.iter().zip(mask).filter(|(&t, &m)| t && m).count();
        let norm = positives.max(1) as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.iter().zip(mask))
            .filter(|(_, (_, &m))| m)
            .map(|(&z, (&t, _))| focal_cell(z, t, alpha, gamma).0)
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / norm),
            Op::FocalLoss { logits, targets: targets.to_vec(), mask: mask.to_vec(), alpha, gamma, norm },
            rg,
            "focal_loss",
        )
    }

    /// Reverse-mode accumulation from a scalar node.
    ///
    /// Populates [`Graph::grad`] for every reachable node and returns the
    /// gradients of all bound parameters. Contributions from nodes used more
    /// than once are summed.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Gradients::new(0);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            if let Op::Param(pid) = self.nodes[i].op {
                params.accumulate(pid, &g);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(params)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let send = |id: NodeId, data: Vec<f64>, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
                }
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, b_t } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC * op(B)^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, vb.data(), !b_t, &mut da, 0.0);
                    send(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_t {
                        // B is n x k: dB = dC^T * A
                        gemm(n, m, k, gd, true, va.data(), false, &mut db, 0.0);
                    } else {
                        // dB = A^T * dC
                        gemm(k, m, n, va.data(), true, gd, false, &mut db, 0.0);
                    }
                    send(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, gd.to_vec(), grads);
                send(*b, gd.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec(), grads);
                send(*b, gd.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                send(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect(), grads);
                send(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect(), grads);
            }
            Op::AddRow { x, bias } => {
                send(*x, gd.to_vec(), grads);
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                send(*bias, db, grads);
            }
            Op::MulCol { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let cols = xv.cols();
                let mut dx = gd.to_vec();
                let mut ds = vec![0.0; sv.len()];
                for (r, &k) in sv.iter().enumerate() {
                    for j in 0..cols {
                        dx[r * cols + j] *= k;
                        ds[r] += gd[r * cols + j] * xv.data()[r * cols + j];
                    }
                }
                send(*x, dx, grads);
                send(*s, ds, grads);
            }
            Op::Scale(x, k) => send(*x, gd.iter().map(|v| v * k).collect(), grads),
            Op::AddScalar(x) => send(*x, gd.to_vec(), grads),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(), grads);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                send(*x, gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect(), grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx, grads);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                send(*x, dx, grads);
                send(*gain, dg, grads);
                send(*bias, db, grads);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    send(p, dp, grads);
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let len = g.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..g.rows() {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                send(*x, dx, grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, gd[offset..offset + n].to_vec(), grads);
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..cols {
                        dx[i * cols + j] += gd[k * cols + j];
                    }
                }
                send(*x, dx, grads);
            }
            Op::Transpose(x) => send(*x, g.transpose()?.into_data(), grads),
            Op::Reshape(x) => send(*x, gd.to_vec(), grads),
            Op::Sum(x) => send(*x, vec![gd[0]; self.value(*x).len()], grads),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![gd[0] / n as f64; n], grads);
            }
            Op::FocalLoss { logits, targets, mask, alpha, gamma, norm } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / norm;
                let dz = z
                    .iter()
                    .zip(targets.iter().zip(mask))
                    .map(|(&zi, (&t, &m))| if m { focal_cell(zi, t, *alpha, *gamma).1 * scale } else { 0.0 })
                    .collect();
                send(*logits, dz, grads);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of one cell and its derivative with respect to the logit.
///
/// Positive: `-alpha (1-p)^gamma ln p`; negative: `-(1-alpha) p^gamma ln(1-p)`,
/// with the logarithm argument floored at `1e-12`.
pub(crate) fn focal_cell(z: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    // p and q = 1 - p are both computed directly to keep precision near saturation.
    let p = sigmoid(z);
    let q = sigmoid(-z);
    let (w, a, b, sign) = if target { (alpha, p, q, 1.0) } else { (1.0 - alpha, q, p, -1.0) };
    // With a the probability of the true label and b = 1 - a, loss = -w b^gamma ln a
    // and da/dz = sign * a * b.
    let clamped = a < LOG_FLOOR;
    let ln_a = a.max(LOG_FLOOR).ln();
    let bg = b.powf(gamma);
    let loss = -w * bg * ln_a;
    // d/dz [b^gamma] = gamma b^(gamma-1) * (-sign a b) = -sign gamma a b^gamma
    let d_bg = -sign * gamma * a * bg;
    // d/dz [ln a] = sign * b, zero when the floor is active
    let d_ln = if clamped { 0.0 } else { sign * b };
    let grad = -w * (d_bg * ln_a + bg * d_ln);
    (loss, grad)
}
