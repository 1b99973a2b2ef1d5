//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every op executed during one forward pass. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, numel, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by the element count).
    Variance,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnaryOp, Var),
    Reduce { kind: ReduceOp, input: Var, kept: Vec<usize>, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LogSoftmax(Var),
    MaskedLogSumExp { input: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Batch statistics produced by a training-mode batch norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

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

    /// Leaf node. Gradients are accumulated only for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor { shape: node.value.shape.clone(), data: g.clone() })
    }

    /// Fingerprint of the branch taken at every piecewise-linear node: the
    /// sign of each ReLU input and the winner of each max and max pool.
    /// Two evaluations with equal fingerprints are on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Unary(UnaryOp::Relu, a) => {
                    i.hash(&mut h);
                    for v in &self.nodes[a.0].value.data {
                        (*v < 0.0).hash(&mut h);
                    }
                }
                Op::Reduce { kind: ReduceOp::Max, argmax, .. } | Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Estimated forward floating-point operations of the nodes in `range`
    /// (tape positions, see [`Graph::len`]). Convolutions and matrix
    /// products count two per multiply-accumulate; elementwise ops one per
    /// output; reductions one per input (three for variance); batch norm
    /// seven per element.
    pub fn flops(&self, range: std::ops::Range<usize>) -> u64 {
        self.nodes[range].iter().map(|n| self.node_flops(n)).sum()
    }

    fn node_flops(&self, n: &Node) -> u64 {
        let out = n.value.len() as u64;
        let input_len = |v: &Var| self.nodes[v.0].value.len() as u64;
        match &n.op {
            Op::Leaf | Op::Reshape(_) | Op::Transpose(_) | Op::Concat { .. } | Op::Slice { .. } => 0,
            Op::Binary(..) | Op::AddScalar(_) | Op::MulScalar(..) | Op::Unary(..) => out,
            Op::Reduce { kind: ReduceOp::Variance, input, .. } => 3 * input_len(input),
            Op::Reduce { input, .. } => input_len(input),
            Op::MatMul(a, _) => 2 * out * self.nodes[a.0].value.shape()[1] as u64,
            Op::Conv2d { geom, .. } => 2 * out * (geom.c_in * geom.kh * geom.kw) as u64,
            Op::MaxPool2d { x, .. } => input_len(x),
            Op::BatchNorm { .. } => 7 * out,
            Op::LogSoftmax(_) => 4 * out,
            Op::MaskedLogSumExp { input, .. } => 3 * input_len(input),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let rank = out_shape.len();
            let (sa, sb) = (broadcast_strides(ta.shape(), rank), broadcast_strides(tb.shape(), rank));
            let mut data = vec![0.0; numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ta.data[ia], tb.data[ib]));
            data
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Unguarded division; any epsilon belongs to the caller's formula.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Relu => |x| if x < 0.0 { 0.0 } else { x },
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Neg => |x| -x,
            UnaryOp::Square => |x| x * x,
        };
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    // ---- reductions --------------------------------------------------

    /// Reduce over `axes`. With `keepdim` the reduced axes stay as size 1,
    /// otherwise they are removed.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() {
            return Err(Error::invalid("reduction over an empty axis list"));
        }
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::InvalidAxis { axis: bad, rank: shape.len() });
        }
        let kept: Vec<usize> =
            shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let count = (numel(&shape) / numel(&kept)) as f64;
        let rank = shape.len();
        let (s_in, s_out) = (broadcast_strides(&shape, rank), broadcast_strides(&kept, rank));
        let x = &self.value(a).data;
        let mut out = vec![0.0; numel(&kept)];
        let mut argmax = Vec::new();
        match kind {
            ReduceOp::Sum | ReduceOp::Mean | ReduceOp::Variance => {
                for_each_broadcast(&shape, &s_in, &s_out, |_, i, o| out[o] += x[i]);
                if kind != ReduceOp::Sum {
                    out.iter_mut().for_each(|v| *v /= count);
                }
                if kind == ReduceOp::Variance {
                    let mean = std::mem::replace(&mut out, vec![0.0; numel(&kept)]);
                    for_each_broadcast(&shape, &s_in, &s_out, |_, i, o| {
                        let d = x[i] - mean[o];
                        out[o] += d * d;
                    });
                    out.iter_mut().for_each(|v| *v /= count);
                }
            }
            ReduceOp::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out.len()];
                for_each_broadcast(&shape, &s_in, &s_out, |_, i, o| {
                    if x[i] > out[o] || argmax[o] == usize::MAX {
                        out[o] = x[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let out_shape = if keepdim {
            kept.clone()
        } else {
            shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::Reduce { kind, input: a, kept, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes, keepdim)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes, keepdim)
    }

    pub fn variance(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Variance, a, axes, keepdim)
    }

    pub fn max(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Max, a, axes, keepdim)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return a;
        }
        self.sum(a, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return a;
        }
        self.mean(a, &axes, false).expect("all axes are valid")
    }

    // ---- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[r, c] = t.shape() else {
            return Err(Error::invalid(format!("transpose needs rank 2, got {:?}", t.shape())));
        };
        let data = transpose_data(&t.data, r, c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { left: first.clone(), right: s.to_vec() });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor { shape, data }, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!("slice {start}..{} outside extent {}", start + len, shape[axis])));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { input: a, axis, start }, rg))
    }

    // ---- linear algebra & convolution --------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::ShapeMismatch { left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch { left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, &ta.data, (k, 1), &tb.data, (n, 1), &mut data, 0.0);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution (cross-correlation) of `x: [B, C_in, H, W]` with
    /// `k: [C_out, C_in, kh, kw]`, zero padding. Output extents use floor
    /// division: `(H + 2p - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tk.shape().to_vec() });
        };
        if kc != c_in {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tk.shape().to_vec() });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel must be odd, got {kh}x{kw}")));
        }
        let (Some(oh), Some(ow)) =
            (kernels::out_extent(h, kh, stride, padding), kernels::out_extent(w, kw, stride, padding))
        else {
            return Err(Error::invalid(format!(
                "conv {kh}x{kw} stride {stride} pad {padding} has no output on {h}x{w}"
            )));
        };
        let geom = ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad: padding, oh, ow };
        let data = kernels::conv2d_forward(&tx.data, &tk.data, &geom);
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(Tensor { shape: vec![batch, c_out, oh, ow], data }, Op::Conv2d { x, k, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let t = self.value(x);
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::invalid(format!("max_pool2d needs rank 4, got {:?}", t.shape())));
        };
        if padding * 2 > kernel {
            return Err(Error::invalid("max_pool2d padding larger than half the window"));
        }
        let (Some(oh), Some(ow)) =
            (kernels::out_extent(h, kernel, stride, padding), kernels::out_extent(w, kernel, stride, padding))
        else {
            return Err(Error::invalid(format!("max_pool2d window {kernel} has no output on {h}x{w}")));
        };
        let (data, argmax) = kernels::max_pool_forward(&t.data, (b, c, h, w), kernel, stride, padding, (oh, ow));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: vec![b, c, oh, ow], data }, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Training-mode batch normalisation of `x: [B, C, H, W]` (or `[B, C]`)
    /// with per-channel affine `gamma`, `beta: [C]`. Statistics are the
    /// population mean and variance over every axis except 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial = numel(&shape[2..]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch { left: vec![c], right: self.shape(p).to_vec() });
            }
        }
        let n = (b * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                mean[ci] += t.data[base..base + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                var[ci] += t.data[base..base + spatial].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, be) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (t.data[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + be[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(Tensor { shape, data: out }, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Row-wise log-softmax of a rank-2 tensor, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[rows, cols] = t.shape() else {
            return Err(Error::invalid(format!("log_softmax needs rank 2, got {:?}", t.shape())));
        };
        let mut data = t.data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::LogSoftmax(a), rg))
    }

    /// Per row `r`, `log Σ_{j: mask[r][j]} exp(a[r][j])` for a rank-2 `a`.
    /// Every row needs at least one selected entry.
    pub fn masked_logsumexp(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let &[rows, cols] = t.shape() else {
            return Err(Error::invalid(format!("masked_logsumexp needs rank 2, got {:?}", t.shape())));
        };
        if mask.len() != rows * cols {
            return Err(Error::invalid("mask length does not match tensor"));
        }
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let sel = || (0..cols).filter(|&j| mask[r * cols + j]).map(|j| t.data[r * cols + j]);
            if sel().next().is_none() {
                return Err(Error::invalid(format!("masked_logsumexp: row {r} selects nothing")));
            }
            let m = sel().fold(f64::NEG_INFINITY, f64::max);
            out.push(if sel().any(f64::is_nan) {
                f64::NAN
            } else if m == f64::NEG_INFINITY {
                m
            } else {
                m + sel().map(|v| (v - m).exp()).sum::<f64>().ln()
            });
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![rows], data: out }, Op::MaskedLogSumExp { input: a, mask: mask.to_vec() }, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Every `requires_grad` leaf
    /// reachable from it accumulates `dloss/dleaf`; calling again without
    /// [`Graph::zero_grad`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                self.backprop_node(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rank = y.rank();
                let (sa, sb) = (broadcast_strides(ta.shape(), rank), broadcast_strides(tb.shape(), rank));
                if let Some(ga) = self.slot(*a, grads) {
                    for_each_broadcast(y.shape(), &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[o],
                            BinaryOp::Mul => g[o] * tb.data[ib],
                            BinaryOp::Div => g[o] / tb.data[ib],
                        }
                    });
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for_each_broadcast(y.shape(), &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinaryOp::Add => g[o],
                            BinaryOp::Sub => -g[o],
                            BinaryOp::Mul => g[o] * ta.data[ia],
                            BinaryOp::Div => -g[o] * ta.data[ia] / (tb.data[ib] * tb.data[ib]),
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, go)| *d += go * s);
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.value(*a).data;
                if let Some(ga) = self.slot(*a, grads) {
                    for (k, d) in ga.iter_mut().enumerate() {
                        // zero upstream stays zero even where the local
                        // derivative is infinite (sqrt at 0)
                        if g[k] == 0.0 {
                            continue;
                        }
                        *d += g[k]
                            * match kind {
                                UnaryOp::Sigmoid => y.data[k] * (1.0 - y.data[k]),
                                UnaryOp::Relu => (x[k] > 0.0) as u8 as f64,
                                UnaryOp::Exp => y.data[k],
                                UnaryOp::Log => 1.0 / x[k],
                                UnaryOp::Sqrt => 0.5 / y.data[k],
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Square => 2.0 * x[k],
                            };
                    }
                }
            }
            Op::Reduce { kind, input, kept, argmax } => {
                let tx = self.value(*input);
                let shape = tx.shape();
                let count = (tx.len() / numel(kept)) as f64;
                let rank = shape.len();
                let (s_in, s_out) = (broadcast_strides(shape, rank), broadcast_strides(kept, rank));
                let mean = if *kind == ReduceOp::Variance {
                    let mut m = vec![0.0; numel(kept)];
                    for_each_broadcast(shape, &s_in, &s_out, |_, i, o| m[o] += tx.data[i]);
                    m.iter_mut().for_each(|v| *v /= count);
                    m
                } else {
                    Vec::new()
                };
                if let Some(ga) = self.slot(*input, grads) {
                    match kind {
                        ReduceOp::Sum => for_each_broadcast(shape, &s_in, &s_out, |_, i, o| ga[i] += g[o]),
                        ReduceOp::Mean => for_each_broadcast(shape, &s_in, &s_out, |_, i, o| ga[i] += g[o] / count),
                        ReduceOp::Variance => for_each_broadcast(shape, &s_in, &s_out, |_, i, o| {
                            ga[i] += g[o] * 2.0 * (tx.data[i] - mean[o]) / count
                        }),
                        ReduceOp::Max => {
                            for (o, &i) in argmax.iter().enumerate() {
                                ga[i] += g[o];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[1], y.shape()[0]);
                if let Some(ga) = self.slot(*a, grads) {
                    // y is [c, r]; transposing g back gives [r, c]
                    for (d, s) in ga.iter_mut().zip(transpose_data(g, c, r)) {
                        *d += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.slot(*a, grads) {
                    // ga(m×k) += g(m×n) · bᵀ(n×k)
                    kernels::gemm(m, n, k, g, (n, 1), &tb.data, (1, n), ga, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // gb(k×n) += aᵀ(k×m) · g(m×n)
                    kernels::gemm(k, m, n, &ta.data, (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let need_dk = self.nodes[k.0].requires_grad;
                let (dx, dk) =
                    kernels::conv2d_backward(&self.value(*x).data, &self.value(*k).data, g, geom, need_dx, need_dk);
                if let (Some(dx), Some(gx)) = (dx, self.slot(*x, grads)) {
                    gx.iter_mut().zip(dx).for_each(|(d, s)| *d += s);
                }
                if let (Some(dk), Some(gk)) = (dk, self.slot(*k, grads)) {
                    gk.iter_mut().zip(dk).for_each(|(d, s)| *d += s);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = self.slot(*v, grads) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let full = self.shape(*input).to_vec();
                let len = y.shape()[*axis];
                let outer = numel(&full[..*axis]);
                let inner = numel(&full[axis + 1..]);
                if let Some(gi) = self.slot(*input, grads) {
                    for o in 0..outer {
                        let base = (o * full[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gi[base..base + len * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = y.shape();
                let (b, c) = (shape[0], shape[1]);
                let spatial = numel(&shape[2..]);
                let n = (b * spatial) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for i in base..base + spatial {
                            sum_g[ci] += g[i];
                            sum_gx[ci] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gg) = self.slot(*gamma, grads) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                let gam = &self.value(*gamma).data;
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci] / n;
                            let base = (bi * c + ci) * spatial;
                            for i in base..base + spatial {
                                gx[i] += scale * (n * g[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = y.shape()[1];
                if let Some(ga) = self.slot(*a, grads) {
                    for (r, row) in y.data.chunks(cols).enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - row[j].exp() * total;
                        }
                    }
                }
            }
            Op::MaskedLogSumExp { input, mask } => {
                let tx = self.value(*input);
                let cols = tx.shape()[1];
                if let Some(ga) = self.slot(*input, grads) {
                    for r in 0..y.len() {
                        for j in 0..cols {
                            let k = r * cols + j;
                            if mask[k] {
                                ga[k] += g[r] * (tx.data[k] - y.data[r]).exp();
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, created on first use; `None` when `v` does
    /// not need a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
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

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests;
