//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh (or [`reset`](Graph::reset)) for every training
//! step. Nodes are appended in evaluation order, so walking them backwards is
//! a valid topological order for the adjoint pass.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row masks for the masked softmax family, `rows × cols`, row-major.
pub type Mask = Arc<Vec<bool>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sqrt(Var),
    Reshape(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SqDist(Var, Var),
    Softmax { x: Var, mask: Option<Mask> },
    LogSoftmax { x: Var, mask: Option<Mask> },
    Nll { logp: Var, targets: Arc<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    GatherCols { x: Var, cols: Arc<Vec<usize>> },
    TopKGroupSum { x: Var, picks: Vec<Vec<usize>> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

const GN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the graph can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape, tracking gradients if the tensor asks for them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = false;
        self.push(value, t.requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix("transpose", a)?;
        let ad = self.data(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = ad[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Transpose(a)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`k` bias to every row of a `(.., k)` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, k) = self.value(x).rows_cols();
        if self.shape(b) != [k] || self.shape(x).is_empty() {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let out = self
            .data(x)
            .chunks(k)
            .flat_map(|row| row.iter().zip(&bd).map(|(v, c)| v + c).collect::<Vec<_>>())
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, rg, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Scale(x, c)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Relu(x)))
    }

    /// Elementwise square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.data(x).iter().find(|v| **v < 0.0) {
            return Err(Error::Degenerate {
                op: "sqrt",
                msg: format!("negative input {v}"),
            });
        }
        let out = self.data(x).iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Sqrt(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Divides every row (last axis) by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let n = kernels::norm(row);
            if n == 0.0 {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    msg: format!("row {i} is the zero vector"),
                });
            }
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::L2NormalizeRows { x, norms }))
    }

    /// Squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix("sq_dist", a)?;
        let (m, d2) = self.matrix("sq_dist", b)?;
        if d != d2 {
            return Err(Error::shape("sq_dist", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = kernels::sq_dist(&ad[i * d..(i + 1) * d], &bd[j * d..(j + 1) * d]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::SqDist(a, b)))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: Option<&Mask>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::shape(op, self.shape(x), &[m.len()]));
            }
            let (rows, cols) = self.value(x).rows_cols();
            for i in 0..rows {
                if !m[i * cols..(i + 1) * cols].iter().any(|b| *b) {
                    return Err(Error::Degenerate {
                        op,
                        msg: format!("row {i} has every entry masked"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Row-wise softmax; masked entries are excluded and come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.check_mask("softmax", x, mask.as_ref())?;
        let (rows, cols) = self.value(x).rows_cols();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for i in 0..rows {
            let r = i * cols..(i + 1) * cols;
            kernels::masked_softmax(&xd[r.clone()], mask.as_ref().map(|m| &m[r.clone()]), &mut out[r]);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax { x, mask }))
    }

    /// Row-wise log-softmax. Masked entries are written as 0 and carry no gradient.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.check_mask("log_softmax", x, mask.as_ref())?;
        let (rows, cols) = self.value(x).rows_cols();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for i in 0..rows {
            let r = i * cols..(i + 1) * cols;
            kernels::masked_log_softmax(&xd[r.clone()], mask.as_ref().map(|m| &m[r.clone()]), &mut out[r]);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::LogSoftmax { x, mask }))
    }

    /// Mean negative log-likelihood: `-(1/n) Σ_i logp[i, targets[i]]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix("nll", logp)?;
        if targets.len() != rows || rows == 0 {
            return Err(Error::shape("nll", self.shape(logp), &[targets.len()]));
        }
        let ld = self.data(logp);
        let mut acc = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::OutOfRange {
                    what: "nll target",
                    index: t,
                    limit: cols,
                });
            }
            acc += ld[i * cols + t];
        }
        let rg = self.rg(&[logp]);
        let op = Op::Nll {
            logp,
            targets: Arc::new(targets.to_vec()),
        };
        Ok(self.push(Tensor::scalar(-acc / rows as f64), rg, op))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Degenerate {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s / n as f64), rg, Op::Mean(x)))
    }

    /// Selects columns of a matrix in the given order (repeats allowed).
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix("gather_cols", x)?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::OutOfRange {
                what: "gather column",
                index: bad,
                limit: c,
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            out.extend(cols.iter().map(|&j| xd[i * c + j]));
        }
        let t = Tensor::new(vec![n, cols.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::GatherCols {
                x,
                cols: Arc::new(cols.to_vec()),
            },
        ))
    }

    /// For each row and each column group, sums the `k` largest entries of the
    /// group (all of them when the group is smaller than `k`). Ties select the
    /// lower column index. Output is `rows × groups.len()`.
    pub fn top_k_group_sum(&mut self, x: Var, groups: &[Vec<usize>], k: usize) -> Result<Var> {
        let (n, c) = self.matrix("top_k_group_sum", x)?;
        if k == 0 {
            return Err(Error::invalid("top_k_group_sum: k must be at least 1"));
        }
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Degenerate {
                    op: "top_k_group_sum",
                    msg: format!("group {gi} is empty"),
                });
            }
            if let Some(&bad) = g.iter().find(|&&j| j >= c) {
                return Err(Error::OutOfRange {
                    what: "group column",
                    index: bad,
                    limit: c,
                });
            }
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * groups.len());
        let mut picks = Vec::with_capacity(n * groups.len());
        let mut vals = Vec::new();
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            for g in groups {
                vals.clear();
                vals.extend(g.iter().map(|&j| row[j]));
                let top = kernels::top_k_indices(&vals, k);
                let chosen: Vec<usize> = top.iter().map(|&t| g[t]).collect();
                out.push(chosen.iter().fold(0.0, |acc, &j| acc + row[j]));
                picks.push(chosen);
            }
        }
        let t = Tensor::new(vec![n, groups.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::TopKGroupSum { x, picks }))
    }

    /// 2-D convolution over `(B, Cin, H, W)` with weights `(Cout, Cin, kh, kw)`
    /// and bias `(Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || self.shape(b) != [ws[0]] || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; bn * cout * oh * ow];
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = xd[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bn, cout, oh, ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// 2×2 max-pool with stride 2 and floor semantics. Ties pick the first
    /// element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("max_pool2d", &xs, &[2, 2]));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(bn * c * oh * ow);
        let mut argmax = Vec::with_capacity(bn * c * oh * ow);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![bn, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Group normalization over `(B, C, ...)` with per-channel affine
    /// `gamma`, `beta` of length `C`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("group_norm", &xs, self.shape(gamma)));
        }
        let (bn, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", &xs, self.shape(gamma)));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        let per = c / groups * spatial;
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = Vec::with_capacity(bn * groups);
        for n in 0..bn {
            for g in 0..groups {
                let start = (n * c + g * (c / groups)) * spatial;
                let seg = &xd[start..start + per];
                let mean = seg.iter().sum::<f64>() / per as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd.push(r);
                for (off, v) in seg.iter().enumerate() {
                    let idx = start + off;
                    let ch = (idx / spatial) % c;
                    let xh = (v - mean) * r;
                    xhat[idx] = xh;
                    out[idx] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates d`loss`/d`v` into every node on the tape that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already consumed; call reset() first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contribs = self.adjoint(id, &g);
            self.nodes[id].grad = Some(g);
            for (v, d) in contribs {
                self.accumulate(v, d);
            }
        }

        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            None => node.grad = Some(d),
        }
    }

    fn adjoint(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).rows_cols();
                let m = self.value(*b).rows_cols().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * bd[p * m + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.value(*a).rows_cols();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g[j * n + i];
                    }
                }
                out.push((*a, da));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                out.push((*a, g.iter().zip(bd).map(|(x, y)| x * y).collect()));
                out.push((*b, g.iter().zip(ad).map(|(x, y)| x * y).collect()));
            }
            Op::AddBias(x, b) => {
                let k = self.value(*b).len();
                let mut db = vec![0.0; k];
                for row in g.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((*x, g.to_vec()));
                out.push((*b, db));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Relu(x) => {
                let xd = self.data(*x);
                out.push((*x, g.iter().zip(xd).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect()));
            }
            Op::Sqrt(x) => {
                out.push((
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(d, s)| if *s > 0.0 { d * 0.5 / s } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::L2NormalizeRows { x, norms } => {
                let cols = node.value.rows_cols().1;
                let mut dx = vec![0.0; g.len()];
                for (i, n) in norms.iter().enumerate() {
                    let r = i * cols..(i + 1) * cols;
                    let proj = kernels::dot(&y[r.clone()], &g[r.clone()]);
                    for j in r {
                        dx[j] = (g[j] - y[j] * proj) / n;
                    }
                }
                out.push((*x, dx));
            }
            Op::SqDist(a, b) => {
                let (n, d) = self.value(*a).rows_cols();
                let m = self.value(*b).rows_cols().0;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for p in 0..d {
                            let diff = ad[i * d + p] - bd[j * d + p];
                            da[i * d + p] += w * diff;
                            db[j * d + p] -= w * diff;
                        }
                    }
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Softmax { x, mask } => {
                let cols = node.value.rows_cols().1;
                let mut dx = vec![0.0; g.len()];
                for (i, row) in y.chunks(cols).enumerate() {
                    let r = i * cols..(i + 1) * cols;
                    let inner = kernels::dot(row, &g[r.clone()]);
                    for j in r {
                        let on = mask.as_ref().is_none_or(|m| m[j]);
                        dx[j] = if on { y[j] * (g[j] - inner) } else { 0.0 };
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax { x, mask } => {
                let cols = node.value.rows_cols().1;
                let mut dx = vec![0.0; g.len()];
                for i in 0..g.len() / cols.max(1) {
                    let r = i * cols..(i + 1) * cols;
                    let on = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
                    let mut gsum = 0.0;
                    for j in r.clone() {
                        if on(j) {
                            gsum += g[j];
                        }
                    }
                    for j in r {
                        if on(j) {
                            dx[j] = g[j] - y[j].exp() * gsum;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Nll { logp, targets } => {
                let cols = self.value(*logp).rows_cols().1;
                let n = targets.len() as f64;
                let mut d = vec![0.0; self.value(*logp).len()];
                for (i, &t) in targets.iter().enumerate() {
                    d[i * cols + t] -= g[0] / n;
                }
                out.push((*logp, d));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::GatherCols { x, cols } => {
                let (n, c) = self.value(*x).rows_cols();
                let k = cols.len();
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for (p, &j) in cols.iter().enumerate() {
                        dx[i * c + j] += g[i * k + p];
                    }
                }
                out.push((*x, dx));
            }
            Op::TopKGroupSum { x, picks } => {
                let (n, c) = self.value(*x).rows_cols();
                let groups = picks.len().checked_div(n).unwrap_or(0);
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for gi in 0..groups {
                        let gv = g[i * groups + gi];
                        for &j in &picks[i * groups + gi] {
                            dx[i * c + j] += gv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let ys = node.value.shape();
                let (oh, ow) = (ys[2], ys[3]);
                let (xd, wdat) = (self.data(*x), self.data(*w));
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdat.len()];
                let mut db = vec![0.0; cout];
                for n in 0..bn {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((n * cout + co) * oh + oy) * ow + ox];
                                db[co] += gv;
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((n * cin + ci) * h + iy as usize) * wd + ix as usize;
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            dx[xi] += gv * wdat[wi];
                                            dw[wi] += gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.shape(*x);
                let (bn, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let per = c / groups * spatial;
                let gd = self.data(*gamma);
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..bn {
                    for gr in 0..*groups {
                        let start = (n * c + gr * (c / groups)) * spatial;
                        let r = rstd[n * groups + gr];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for idx in start..start + per {
                            let ch = (idx / spatial) % c;
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                            let dxh = g[idx] * gd[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[idx];
                        }
                        let pf = per as f64;
                        for idx in start..start + per {
                            let ch = (idx / spatial) % c;
                            let dxh = g[idx] * gd[ch];
                            dx[idx] = r / pf * (pf * dxh - sum_dxh - xhat[idx] * sum_dxh_xh);
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
        }
        out
    }
}
