//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! Every operation is evaluated eagerly when it is recorded; the graph keeps
//! the values and the operation that produced them. Node ids are assigned in
//! creation order, which is a topological order, so [`Graph::backward`] is a
//! single reverse sweep. A node used by several consumers receives the sum
//! of their contributions.
//!
//! Shapes are explicit. The only broadcasting operation is
//! [`Graph::add_row`], which adds one vector to every row of a matrix.
//!
//! A graph is confined to one thread. Independent graphs share nothing and
//! can be built concurrently.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::param::{ParamId, ParamStore};
use crate::sampler::trilinear;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    LogSumExp(NodeId),
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    Concat(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Trilinear(NodeId, NodeId),
    WeightedPointSum(NodeId, NodeId),
    LogDetSpd {
        a: NodeId,
        inverse: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if the node is reachable
    /// from the loss and requires a gradient.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter that was bound into the graph.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|n| self.wrt(*n))
    }

    /// Every bound parameter with a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, n)| self.wrt(*n).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn fibers(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> NodeId {
        self.precision.round_slice(value.data_mut());
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        use Op::*;
        match op {
            Leaf | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MatMul(a, b) => vec![*a, *b],
            Trilinear(a, b) | WeightedPointSum(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Reshape(a)
            | Relu(a)
            | Gelu(a)
            | Sigmoid(a)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Sin(a)
            | Cos(a)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | LogSumExp(a)
            | SumAll(a)
            | SumAxis(a, _)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | GatherRows(a, _)
            | Pick(a, _) => vec![*a],
            Concat(xs) | ConcatCols(xs) => xs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            LogDetSpd { a, .. } => vec![*a],
        }
    }

    // ---- leaves -----------------------------------------------------------

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Binds a stored parameter into the graph. Binding the same id twice
    /// returns the same node. All bound ids must come from one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.params.get(&id) {
            return *n;
        }
        let n = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, n);
        n
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact Gaussian-error linear unit, `x·Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// Adds the vector `v` (length `d`) to every row of `x` (`n × d`).
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(x)?;
        if self.value(v).len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vv = self.data(v);
        let mut data = self.data(x).to_vec();
        for r in 0..n {
            for (o, &b) in data[r * d..(r + 1) * d].iter_mut().zip(vv) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::AddRow(x, v)))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `log det A` for a symmetric positive-definite `A`, via Cholesky.
    /// A failed factorization is an error.
    pub fn logdet_spd(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, n2) = self.dims2(a)?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "logdet_spd",
                lhs: vec![n, n2],
                rhs: vec![n, n],
            });
        }
        let chol = linalg::cholesky(self.data(a), n)?;
        let logdet = linalg::cholesky_logdet(&chol, n);
        let inverse = linalg::cholesky_inverse(&chol, n);
        Ok(self.push(Tensor::scalar(logdet), Op::LogDetSpd { a, inverse }))
    }

    // ---- reductions and normalizations --------------------------------------

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, n, inner) = fibers(self.shape(a), axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[idx(i)] /= sum;
                }
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, n, inner) = fibers(self.shape(a), axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|i| (x[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..n {
                    out[idx(i)] = x[idx(i)] - lse;
                }
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmax(a, axis)))
    }

    /// `log Σ exp(x)` over all elements.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.data(a);
        if x.is_empty() {
            return Err(Error::InvalidInput("logsumexp of an empty tensor".into()));
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(self.push(Tensor::scalar(lse), Op::LogSumExp(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = fibers(&shape, axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += x[(o * n + i) * inner + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let n = *self.shape(a).get(axis).ok_or_else(|| Error::InvalidAxis {
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// Row-wise layer normalization of `x` (`n × d`) with gain and offset
    /// vectors of length `d`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (n, d) = self.dims2(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![n, d],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- structural -------------------------------------------------------

    /// Concatenates along axis 0. All inputs share `shape[1..]`.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::InvalidInput("concat needs at least 1-D inputs".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec())))
    }

    /// Stacks scalars into a vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut vs = Vec::with_capacity(xs.len());
        for &x in xs {
            vs.push(self.reshape(x, &[1])?);
        }
        self.concat(&vs)
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidInput("concat_cols of nothing".into()))?;
        let (n, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x)?;
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.data(x);
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(xs.to_vec())))
    }

    /// Rows `start..start+len` of a tensor (along axis 0).
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(a)[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceRows(a, start)))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(a)?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![n, c],
                rhs: vec![start, len],
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], data)?, Op::SliceCols(a, start)))
    }

    /// Selects rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, c) = self.dims2(a)?;
        let src = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidInput(format!(
                    "gather index {i} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(Tensor::new(vec![idx.len(), c], data)?, Op::GatherRows(a, idx.to_vec())))
    }

    /// One element (by flat index) as a scalar.
    pub fn pick(&mut self, a: NodeId, flat: usize) -> Result<NodeId> {
        let v = *self
            .data(a)
            .get(flat)
            .ok_or_else(|| Error::InvalidInput(format!("pick index {flat} out of range")))?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, flat)))
    }

    // ---- domain kernels ---------------------------------------------------

    /// Trilinear samples of a `d × t × h × w` volume at `P × 3` normalized
    /// locations `(temporal, vertical, horizontal)`; result is `P × d`.
    /// Locations are clamped to `[0,1]³`.
    pub fn trilinear(&mut self, volume: NodeId, locations: NodeId) -> Result<NodeId> {
        let vshape = self.shape(volume).to_vec();
        let dims = trilinear::VolumeDims::from_shape(&vshape)?;
        let (p, three) = self.dims2(locations)?;
        if three != 3 {
            return Err(Error::ShapeMismatch {
                op: "trilinear",
                lhs: vshape,
                rhs: vec![p, three],
            });
        }
        let locs = self.data(locations);
        if let Some(bad) = locs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampling location row {}", bad / 3)));
        }
        let out = trilinear::forward(self.data(volume), dims, locs);
        Ok(self.push(
            Tensor::new(vec![p, dims.channels], out)?,
            Op::Trilinear(volume, locations),
        ))
    }

    /// For `samples` of shape `(Q·K) × d` and `weights` of shape `Q × K`,
    /// returns `out[q] = Σ_k weights[q,k] · samples[q·K + k]`.
    pub fn weighted_point_sum(&mut self, samples: NodeId, weights: NodeId) -> Result<NodeId> {
        let (qk, d) = self.dims2(samples)?;
        let (q, k) = self.dims2(weights)?;
        if q * k != qk {
            return Err(Error::ShapeMismatch {
                op: "weighted_point_sum",
                lhs: vec![qk, d],
                rhs: vec![q, k],
            });
        }
        let s = self.data(samples);
        let w = self.data(weights);
        let mut out = vec![0.0; q * d];
        for qi in 0..q {
            let orow = &mut out[qi * d..(qi + 1) * d];
            for ki in 0..k {
                let wv = w[qi * k + ki];
                let srow = &s[(qi * k + ki) * d..(qi * k + ki + 1) * d];
                for (o, &sv) in orow.iter_mut().zip(srow) {
                    *o += wv * sv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![q, d], out)?, Op::WeightedPointSum(samples, weights)))
    }

    // ---- losses -----------------------------------------------------------

    /// `−log softmax(logits)[label]` for a vector (or `1 × C`) of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let classes = match shape.as_slice() {
            [c] | [1, c] => *c,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: shape,
                    rhs: vec![0],
                })
            }
        };
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let axis = shape.len() - 1;
        let ls = self.log_softmax(logits, axis)?;
        let picked = self.pick(ls, label)?;
        Ok(self.scale(picked, -1.0))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            self.precision.round_slice(&mut g);
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv / x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (((o, gv), x), z) in gb.iter_mut().zip(g).zip(bv).zip(av) {
                        *o -= gv * z / (x * x);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::AddRow(x, v) => {
                let d = self.value(*v).len();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for row in g.chunks(d) {
                        gv.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_into(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_into(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a)?;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv / xv;
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv / (2.0 * yv);
                    }
                }
            }
            Op::Sin(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * xv.cos();
                    }
                }
            }
            Op::Cos(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o -= gv * xv.sin();
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = fibers(self.shape(*a), *axis)?;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = fibers(self.shape(*a), *axis)?;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let gsum: f64 = (0..n).map(|i| g[idx(i)]).sum();
                            for i in 0..n {
                                ga[idx(i)] += g[idx(i)] - y[idx(i)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = self.data(*a);
                let lse = y[0];
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, xv) in ga.iter_mut().zip(x) {
                        *o += g[0] * (xv - lse).exp();
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = fibers(self.shape(*a), *axis)?;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                ga[(o * n + i) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = self.value(*x).len();
                    if let Some(gx) = self.slot(grads, *x) {
                        gx.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for x in xs {
                    let (n, w) = self.dims2(*x)?;
                    if let Some(gx) = self.slot(grads, *x) {
                        for r in 0..n {
                            for c in 0..w {
                                gx[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let row: usize = self.shape(*a)[1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    ga[start * row..start * row + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::SliceCols(a, start) => {
                let (n, c) = self.dims2(*a)?;
                let len = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..n {
                        for j in 0..len {
                            ga[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = self.dims2(*a)?;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Pick(a, flat) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*flat] += g[0];
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.dims2(*x)?;
                let gam = self.data(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..n {
                        let dh: Vec<f64> = (0..d).map(|c| g[r * d + c] * gam[c]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = (0..d).map(|c| dh[c] * xhat[r * d + c]).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Trilinear(vol, locs) => {
                let dims = trilinear::VolumeDims::from_shape(self.shape(*vol))?;
                let vdata = self.data(*vol);
                let ldata = self.data(*locs);
                let need_vol = self.nodes[vol.0].requires_grad;
                let need_loc = self.nodes[locs.0].requires_grad;
                let mut gvol = need_vol.then(|| vec![0.0; vdata.len()]);
                let mut gloc = need_loc.then(|| vec![0.0; ldata.len()]);
                trilinear::backward(vdata, dims, ldata, g, gvol.as_deref_mut(), gloc.as_deref_mut());
                if let (Some(src), Some(dst)) = (gvol, self.slot(grads, *vol)) {
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
                if let (Some(src), Some(dst)) = (gloc, self.slot(grads, *locs)) {
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
            }
            Op::WeightedPointSum(samples, weights) => {
                let (_, d) = self.dims2(*samples)?;
                let (q, k) = self.dims2(*weights)?;
                let (s, w) = (self.data(*samples), self.data(*weights));
                if let Some(gs) = self.slot(grads, *samples) {
                    for qi in 0..q {
                        for ki in 0..k {
                            let wv = w[qi * k + ki];
                            let row = (qi * k + ki) * d;
                            for j in 0..d {
                                gs[row + j] += wv * g[qi * d + j];
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *weights) {
                    for qi in 0..q {
                        for ki in 0..k {
                            let row = (qi * k + ki) * d;
                            gw[qi * k + ki] += (0..d).map(|j| s[row + j] * g[qi * d + j]).sum::<f64>();
                        }
                    }
                }
            }
            Op::LogDetSpd { a, inverse } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(inverse).for_each(|(o, v)| *o += g[0] * v);
                }
            }
        }
        Ok(())
    }
}
