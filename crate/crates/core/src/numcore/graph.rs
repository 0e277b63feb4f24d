//! Gradient tape.
//!
//! A [`Graph`] records every op whose inputs require gradients; [`Graph::backward`]
//! walks the record once in reverse. Nodes that do not depend on a trainable
//! leaf are stored as constants and never visited.

use std::collections::BTreeMap;

use super::{NumError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, kernel: usize },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    CosineRows { a: Var, b: Var, eps: f64 },
    CosinePaired { a: Var, b: Var, eps: f64 },
    TopkMean { x: Var, k: usize, picks: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    ScaleRows(Var, Var),
    Reshape(Var),
    GaussLogpdf { z: Var, mu: Var, scale: Var },
    LogSumExpRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a graph.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` when the leaf was not registered as trainable.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(v, t)| (*v, t))
    }
}

/// Reverse-mode tape confined to a single forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn mismatch(op: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn clamped_norm(row: &[f64], eps: f64) -> (f64, bool) {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > eps {
        (n, true)
    } else {
        (eps, false)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Constant leaf (random draws, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("transpose", self.value(a))?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), &[a])
    }

    /// Same-length temporal convolution with zero padding.
    ///
    /// `x` is `[T, C_in]`, `w` is `[kernel, C_in, C_out]` with odd `kernel`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t_len, c_in) = require_matrix("conv1d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in || ws[0] % 2 == 0 {
            return Err(mismatch(
                "conv1d",
                format!("input [{t_len},{c_in}] with kernel shape {ws:?} (need [odd, {c_in}, out])"),
            ));
        }
        let (kernel, c_out) = (ws[0], ws[2]);
        let pad = kernel / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..kernel {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xrow = &xd[(src - pad) * c_in..(src - pad + 1) * c_in];
                let wblock = &wd[j * c_in * c_out..(j + 1) * c_in * c_out];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wblock[i * c_out..(i + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push("conv1d", Tensor::matrix(t_len, c_out, out)?, Op::Conv1d { x, w, kernel }, &[x, w])
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = require_matrix("add_bias", self.value(x))?;
        if self.value(b).numel() != n {
            return Err(mismatch("add_bias", format!("[{m},{n}] + bias {:?}", self.value(b).shape())));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        self.push("add_bias", Tensor::matrix(m, n, out)?, Op::AddBias(x, b), &[x, b])
    }

    // ---- elementwise ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, s)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("ln", out, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(a), &[a])
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(floor));
        self.push("clamp_min", out, Op::ClampMin(a, floor), &[a])
    }

    // ---- normalisation ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(mismatch("softmax", format!("axis {axis} of shape {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| out[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (out[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(mismatch("log_softmax", format!("axis {axis} of shape {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| out[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|l| (out[idx(l)] - m).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[idx(l)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", out, Op::LogSoftmax { x, axis }, &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let s = t.sum() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums a matrix along `axis`, dropping that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(mismatch("sum_axis", format!("axis {axis} of shape {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x, axis }, &[x])
    }

    // ---- similarity and pooling ----

    /// Cosine similarity of every row of `a` `[m, d]` against every row of `b` `[n, d]`.
    ///
    /// Row norms below `eps` are clamped to `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (m, d) = require_matrix("cosine_rows", self.value(a))?;
        let (n, d2) = require_matrix("cosine_rows", self.value(b))?;
        if d != d2 {
            return Err(mismatch("cosine_rows", format!("[{m},{d}] vs [{n},{d2}]")));
        }
        let (at, bt) = (self.value(a), self.value(b));
        let bn: Vec<f64> = (0..n).map(|j| clamped_norm(bt.row(j), eps).0).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = at.row(i);
            let an = clamped_norm(ar, eps).0;
            for j in 0..n {
                out[i * n + j] = dot(ar, bt.row(j)) / (an * bn[j]);
            }
        }
        self.push("cosine_rows", Tensor::matrix(m, n, out)?, Op::CosineRows { a, b, eps }, &[a, b])
    }

    /// Row-wise cosine similarity of two `[m, d]` matrices, giving `[m]`.
    pub fn cosine_paired(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (m, _) = require_matrix("cosine_paired", self.value(a))?;
        same_shape("cosine_paired", self.value(a), self.value(b))?;
        let (at, bt) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let (ar, br) = (at.row(i), bt.row(i));
                dot(ar, br) / (clamped_norm(ar, eps).0 * clamped_norm(br, eps).0)
            })
            .collect();
        self.push("cosine_paired", Tensor::vector(out), Op::CosinePaired { a, b, eps }, &[a, b])
    }

    /// Mean of the `k` largest entries of each column of a `[T, C]` matrix.
    ///
    /// Ties are broken toward the earlier time index.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let (t_len, c) = require_matrix("topk_mean", self.value(x))?;
        if k == 0 || k > t_len {
            return Err(NumError::InvalidArgument(format!("top-k with k={k} over {t_len} rows")));
        }
        let xt = self.value(x);
        let mut picks = Vec::with_capacity(k * c);
        let mut out = Vec::with_capacity(c);
        let mut order: Vec<usize> = Vec::with_capacity(t_len);
        for j in 0..c {
            order.clear();
            order.extend(0..t_len);
            order.sort_by(|&p, &q| xt.get(q, j).total_cmp(&xt.get(p, j)).then(p.cmp(&q)));
            let s: f64 = order[..k].iter().map(|&t| xt.get(t, j)).sum();
            out.push(s / k as f64);
            picks.extend_from_slice(&order[..k]);
        }
        self.push("topk_mean", Tensor::vector(out), Op::TopkMean { x, k, picks }, &[x])
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NumError::InvalidArgument(format!("concat of {} parts on axis {axis}", parts.len())));
        }
        let shapes: Vec<(usize, usize)> =
            parts.iter().map(|&p| require_matrix("concat", self.value(p))).collect::<Result<_>>()?;
        let out = if axis == 0 {
            let cols = shapes[0].1;
            if shapes.iter().any(|s| s.1 != cols) {
                return Err(mismatch("concat", format!("column counts {shapes:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(shapes.iter().map(|s| s.0).sum(), cols, data)?
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(mismatch("concat", format!("row counts {shapes:?}")));
            }
            let total: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = require_matrix("gather_rows", t)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(NumError::InvalidArgument(format!("row {bad} out of {m}")));
        }
        let out = t.select_rows(indices);
        self.push("gather_rows", out, Op::GatherRows { x, indices: indices.to_vec() }, &[x])
    }

    /// Multiplies row `i` of an `[m, n]` matrix by `v[i]`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = require_matrix("scale_rows", self.value(x))?;
        if self.value(v).numel() != m {
            return Err(mismatch("scale_rows", format!("[{m},{n}] rows vs {:?}", self.value(v).shape())));
        }
        let vd = self.value(v).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, x)| x * vd[i / n]).collect();
        self.push("scale_rows", Tensor::matrix(m, n, out)?, Op::ScaleRows(x, v), &[x, v])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    // ---- Gaussian densities ----

    /// Log-density of every sample row of `z` `[S, D]` under every diagonal
    /// Gaussian `(mu[t], scale[t])`, giving `[S, T]`. `scale` holds standard
    /// deviations.
    pub fn gauss_logpdf(&mut self, z: Var, mu: Var, scale: Var) -> Result<Var> {
        let (s_len, d) = require_matrix("gauss_logpdf", self.value(z))?;
        let (t_len, d2) = require_matrix("gauss_logpdf", self.value(mu))?;
        same_shape("gauss_logpdf", self.value(mu), self.value(scale))?;
        if d != d2 {
            return Err(mismatch("gauss_logpdf", format!("samples [{s_len},{d}] vs means [{t_len},{d2}]")));
        }
        let (zt, mt, st) = (self.value(z), self.value(mu), self.value(scale));
        let mut inv = vec![0.0; t_len * d];
        let mut norm = vec![0.0; t_len];
        for t in 0..t_len {
            let mut log_det = 0.0;
            for k in 0..d {
                let s = st.get(t, k);
                inv[t * d + k] = 1.0 / s;
                log_det += s.ln();
            }
            norm[t] = -log_det - 0.5 * d as f64 * LN_2PI;
        }
        let mut out = vec![0.0; s_len * t_len];
        for si in 0..s_len {
            let zr = zt.row(si);
            for t in 0..t_len {
                let mr = mt.row(t);
                let ir = &inv[t * d..(t + 1) * d];
                let mut q = 0.0;
                for k in 0..d {
                    let r = (zr[k] - mr[k]) * ir[k];
                    q += r * r;
                }
                out[si * t_len + t] = norm[t] - 0.5 * q;
            }
        }
        self.push(
            "gauss_logpdf",
            Tensor::matrix(s_len, t_len, out)?,
            Op::GaussLogpdf { z, mu, scale },
            &[z, mu, scale],
        )
    }

    /// Row-wise log-sum-exp of an `[S, T]` matrix, giving `[S]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (s_len, _) = require_matrix("logsumexp_rows", self.value(x))?;
        let t = self.value(x);
        let out: Vec<f64> = (0..s_len).map(|i| logsumexp(t.row(i))).collect();
        self.push("logsumexp_rows", Tensor::vector(out), Op::LogSumExpRows(x), &[x])
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable leaf on the graph; leaves the loss
    /// does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut by_leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let od = out.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gbv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, kernel } => {
                let (t_len, c_in) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let c_out = self.value(*w).shape()[2];
                let pad = kernel / 2;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..*kernel {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let base = (src - pad) * c_in;
                            for i in 0..c_in {
                                let wrow = &wd[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                                gx[base + i] += dot(grow, wrow);
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..*kernel {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let xrow = &xd[(src - pad) * c_in..(src - pad + 1) * c_in];
                            for (i, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let off = (j * c_in + i) * c_out;
                                for (gwv, gv) in gw[off..off + c_out].iter_mut().zip(grow) {
                                    *gwv += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (x, gv) in gb.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += s * gv;
                }
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Square(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * ad[i] * g[i];
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > *floor {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * od[i] * (1.0 - od[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * od[i];
                }
            }),
            Op::Ln(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / (2.0 * od[i]);
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let s: f64 = (0..len).map(|l| g[idx(l)] * od[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += od[idx(l)] * (g[idx(l)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let s: f64 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += g[idx(l)] - od[idx(l)].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_layout(self.value(*x).shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::CosineRows { a, b, eps } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, d) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[0];
                let an: Vec<(f64, bool)> = (0..m).map(|i| clamped_norm(at.row(i), *eps)).collect();
                let bn: Vec<(f64, bool)> = (0..n).map(|j| clamped_norm(bt.row(j), *eps)).collect();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let (na, free_a) = an[i];
                        let ar = at.row(i);
                        let gr = &mut ga[i * d..(i + 1) * d];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let c = gij / (na * bn[j].0);
                            let radial = if free_a { gij * od[i * n + j] / (na * na) } else { 0.0 };
                            for (k, gv) in gr.iter_mut().enumerate() {
                                *gv += c * bt.row(j)[k] - radial * ar[k];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..n {
                        let (nb, free_b) = bn[j];
                        let br = bt.row(j);
                        let gr = &mut gb[j * d..(j + 1) * d];
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let c = gij / (an[i].0 * nb);
                            let radial = if free_b { gij * od[i * n + j] / (nb * nb) } else { 0.0 };
                            for (k, gv) in gr.iter_mut().enumerate() {
                                *gv += c * at.row(i)[k] - radial * br[k];
                            }
                        }
                    }
                });
            }
            Op::CosinePaired { a, b, eps } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, d) = (at.shape()[0], at.shape()[1]);
                let norms: Vec<((f64, bool), (f64, bool))> =
                    (0..m).map(|i| (clamped_norm(at.row(i), *eps), clamped_norm(bt.row(i), *eps))).collect();
                for (target, this, other, pick) in [(*a, at, bt, 0usize), (*b, bt, at, 1usize)] {
                    self.accumulate(grads, target, |gt| {
                        for i in 0..m {
                            let ((n_this, free), (n_other, _)) =
                                if pick == 0 { (norms[i].0, norms[i].1) } else { (norms[i].1, norms[i].0) };
                            let c = g[i] / (n_this * n_other);
                            let radial = if free { g[i] * od[i] / (n_this * n_this) } else { 0.0 };
                            let (tr, orow) = (this.row(i), other.row(i));
                            for k in 0..d {
                                gt[i * d + k] += c * orow[k] - radial * tr[k];
                            }
                        }
                    });
                }
            }
            Op::TopkMean { x, k, picks } => {
                let c = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for j in 0..c {
                        for &t in &picks[j * k..(j + 1) * k] {
                            gx[t * c + j] += g[j] / *k as f64;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.accumulate(grads, p, |gp| add_into(gp, &g[off..off + n]));
                        off += n;
                    }
                } else {
                    let rows = out.shape()[0];
                    let total = out.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        self.accumulate(grads, p, |gp| {
                            for r in 0..rows {
                                add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ScaleRows(x, v) => {
                let n = self.value(*x).shape()[1];
                let (xd, vd) = (self.value(*x).data(), self.value(*v).data());
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * vd[i / n];
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for i in 0..g.len() {
                        gv[i / n] += g[i] * xd[i];
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::GaussLogpdf { z, mu, scale } => {
                let (zt, mt, st) = (self.value(*z), self.value(*mu), self.value(*scale));
                let (s_len, d) = (zt.shape()[0], zt.shape()[1]);
                let t_len = mt.shape()[0];
                // residual r = (z - mu) / s; dL/dz = -r/s, dL/dmu = r/s, dL/ds = (r^2 - 1)/s
                let mut gz = vec![0.0; s_len * d];
                let mut gmu = vec![0.0; t_len * d];
                let mut gs = vec![0.0; t_len * d];
                for si in 0..s_len {
                    let zr = zt.row(si);
                    for t in 0..t_len {
                        let gv = g[si * t_len + t];
                        if gv == 0.0 {
                            continue;
                        }
                        let (mr, sr) = (mt.row(t), st.row(t));
                        for k in 0..d {
                            let inv = 1.0 / sr[k];
                            let r = (zr[k] - mr[k]) * inv;
                            let dz = -gv * r * inv;
                            gz[si * d + k] += dz;
                            gmu[t * d + k] -= dz;
                            gs[t * d + k] += gv * (r * r - 1.0) * inv;
                        }
                    }
                }
                self.accumulate(grads, *z, |x| add_into(x, &gz));
                self.accumulate(grads, *mu, |x| add_into(x, &gmu));
                self.accumulate(grads, *scale, |x| add_into(x, &gs));
            }
            Op::LogSumExpRows(x) => {
                let xt = self.value(*x);
                let t_len = xt.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (si, &lse) in od.iter().enumerate() {
                        for (t, &v) in xt.row(si).iter().enumerate() {
                            gx[si * t_len + t] += g[si] * (v - lse).exp();
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
