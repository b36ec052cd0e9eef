//! Define-by-run reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so parents always precede children and a single reverse
//! sweep visits each node once.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    SumSq(Var),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    frozen_prefixes: Vec<String>,
    params: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, frozen_prefixes: Vec::new(), params: HashMap::new() }
    }

    /// A frozen tape: nothing requires gradients. Used for evaluation and for
    /// forward passes whose result only feeds a discrete decision.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn is_frozen(&self) -> bool {
        !self.grad_enabled
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients (unless the tape is frozen).
    pub fn var(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a leaf. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?.clone();
        let trainable = self.grad_enabled && !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if trainable { self.var(t) } else { self.constant(t) };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let (n2, p) = self.value(b).dims2();
        if n != n2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let (p, n2) = self.value(b).dims2();
        if n != n2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * p];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds the vector `row` to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.value(row).len() != w {
            return Err(self.dim_err("add_row", x, row));
        }
        let r = self.value(row).data().to_vec();
        let v = self.value(x);
        let data = v.data().chunks(w).flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Dimension { op: "mul_const", lhs: self.shape(x).to_vec(), rhs: vec![c.len()] });
        }
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().zip(&c).map(|(a, b)| a * b).collect());
        Ok(self.push(t, Op::MulConst(x, c), &[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| gelu(a)).collect());
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a.ln()).collect());
        Ok(self.push(t, Op::Ln(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Positions where `mask` is `false` receive
    /// probability exactly 0, which is the additive −∞ mask without feeding
    /// infinities through the tape.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(Error::Dimension { op: "softmax_masked", lhs: v.shape().to_vec(), rhs: vec![m.len()] });
            }
        }
        let w = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (r, (src, dst)) in v.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * w + j]);
            softmax_row(src, dst, keep);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric("log_softmax input".into()));
        }
        let w = v.last_dim();
        let data = v.data().chunks(w).flat_map(log_softmax).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.value(gain).len() != w {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != w {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let v = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = v.rows();
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let src = v.row(r);
            let mean = src.iter().sum::<f64>() / w as f64;
            let var = src.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (src[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over positions whose mask flag is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = self.value(logits);
        let (t_len, vocab) = v.dims2();
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every position is masked".into()));
        }
        if !v.is_finite() {
            return Err(Error::Numeric("cross_entropy logits".into()));
        }
        let mut probs = vec![0.0; t_len * vocab];
        let mut total = 0.0;
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            if targets[t] >= vocab {
                return Err(Error::Dimension { op: "cross_entropy target", lhs: vec![targets[t]], rhs: vec![vocab] });
            }
            let row = v.row(t);
            let lse = log_sum_exp(row);
            total += lse - row[targets[t]];
            for j in 0..vocab {
                probs[t * vocab + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// Rows of a 2-D `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        let (n, w) = v.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension { op: "gather_rows", lhs: v.shape().to_vec(), rhs: vec![bad] });
        }
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), w], data);
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (n, w) = v.dims2();
        if len == 0 || start + len > n {
            return Err(Error::Dimension { op: "slice_rows", lhs: v.shape().to_vec(), rhs: vec![start, len] });
        }
        let t = Tensor::from_parts(vec![len, w], v.data()[start * w..(start + len) * w].to_vec());
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        let (n, w) = v.dims2();
        if width == 0 || start + width > w {
            return Err(Error::Dimension { op: "slice_cols", lhs: v.shape().to_vec(), rhs: vec![start, width] });
        }
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&v.row(r)[start..start + width]);
        }
        let t = Tensor::from_parts(vec![n, width], data);
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2().0;
        if parts.iter().any(|&p| self.value(p).dims2().0 != n) {
            return Err(self.dim_err("concat_cols", parts[0], parts[parts.len() - 1]));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![n, total], data);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|a| a * a).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.nodes.push(Node { value: t, op: Op::StopGrad, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension { op: "backward", lhs: self.shape(loss).to_vec(), rhs: vec![1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (name.clone(), Tensor::from_parts(self.shape(*v).to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.value(*a).dims2();
                let p = self.value(*b).dims2().1;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| matmul_nt_into(g, bv, ga, m, p, n));
                self.accumulate(grads, *b, |gb| matmul_tn_into(av, g, gb, m, n, p));
            }
            Op::MatMulNT(a, b) => {
                let (m, n) = self.value(*a).dims2();
                let p = self.value(*b).dims2().0;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| matmul_into(g, bv, ga, m, p, n));
                self.accumulate(grads, *b, |gb| matmul_tn_into(g, av, gb, m, p, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * s)),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let w = self.value(*x).last_dim();
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(w) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, |gx| {
                for ((o, d), k) in gx.iter_mut().zip(g).zip(c) {
                    *o += d * k;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, d), &a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += d * gelu_grad(a);
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, d), &a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += d / a;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            or[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..w {
                            or[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let w = node.value.last_dim();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; w];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        for j in 0..w {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let n = w as f64;
                        for j in 0..w {
                            gx[r * w + j] += is / n * (n * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks(w) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (t, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            gl[t * vocab + j] += scale * probs[t * vocab + j];
                        }
                        gl[t * vocab + targets[t]] -= scale;
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let w = self.value(*table).last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let w = self.value(*x).last_dim();
                self.accumulate(grads, *x, |gx| add_into(&mut gx[start * w..start * w + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let w = self.value(*x).last_dim();
                let width = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (r, gr) in g.chunks(width).enumerate() {
                        add_into(&mut gx[r * w + start..r * w + start + width], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).last_dim();
                    self.accumulate(grads, p, |gp| {
                        for (r, gr) in gp.chunks_mut(width).enumerate() {
                            add_into(gr, &g[r * total + offset..r * total + offset + width]);
                        }
                    });
                    offset += width;
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::SumSq(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for (o, a) in gx.iter_mut().zip(xv) {
                        *o += 2.0 * a * g[0];
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a node, `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a node with absent entries reported as zeros.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
    }

    /// Gradients of every trainable parameter bound on the tape.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

fn softmax_row(src: &[f64], dst: &mut [f64], keep: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &a) in src.iter().enumerate() {
        if keep(j) && a > max {
            max = a;
        }
    }
    let mut total = 0.0;
    for (j, &a) in src.iter().enumerate() {
        if keep(j) {
            let e = (a - max).exp();
            dst[j] = e;
            total += e;
        }
    }
    for (j, d) in dst.iter_mut().enumerate() {
        if keep(j) {
            *d /= total;
        }
    }
}

/// Log-softmax of a single slice (no tape).
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|a| a - lse).collect()
}

/// Softmax of a single slice (no tape).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_row(row, &mut out, |_| true);
    out
}
