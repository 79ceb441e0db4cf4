use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{NeurankError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar { s: usize, x: usize },
    Sum(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Unfold { x: usize, n: usize },
    CosineMatrix { a: usize, b: usize },
    KernelPool {
        m: usize,
        mus: Vec<f64>,
        sigmas: Vec<f64>,
        floor: f64,
    },
    BceWithLogits { s: usize, label: f64 },
    Hinge { pos: usize, neg: usize, active: bool },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout { x: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Recording order is a topological
/// order of the computation graph, so the backward pass walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
thread_local! {
    pub(crate) static CORRUPT_GELU_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn gelu_grad(x: f64) -> f64 {
    #[cfg(test)]
    if CORRUPT_GELU_GRAD.with(|c| c.get()) {
        return kernels::normal_cdf(x);
    }
    kernels::gelu_grad(x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NeurankError {
    NeurankError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ` for a (m×k) and b (n×k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a.0), &[a.0]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        if bv.numel() != cols {
            return Err(shape_err("add_row", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        let (sv, xv) = (self.value(s), self.value(x));
        if sv.numel() != 1 {
            return Err(shape_err("mul_scalar", sv, xv));
        }
        let c = sv.data()[0];
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        Ok(self.push(out, Op::MulScalar { s: s.0, x: x.0 }, &[s.0, x.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several same-shape values; `None` when `vars` is empty.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Option<Var>> {
        let mut iter = vars.iter();
        let Some(&first) = iter.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &v in iter {
            acc = self.add(acc, v)?;
        }
        Ok(Some(acc))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let h = xv.cols();
        if gv.numel() != h || bv.numel() != h {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat_all = Vec::with_capacity(xv.numel());
        let mut rstds = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(h) {
            let (xhat, rstd) = kernels::normalize(row, eps);
            for j in 0..h {
                out.push(gv.data()[j] * xhat[j] + bv.data()[j]);
            }
            xhat_all.extend(xhat);
            rstds.push(rstd);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat: xhat_all,
            rstd: rstds,
        };
        Ok(self.push(out, op, &[x.0, gain.0, bias.0]))
    }

    /// Row softmax; columns with `key_mask[j] == false` receive exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if let Some(mask) = key_mask {
            if mask.len() != cols {
                return Err(NeurankError::Shape {
                    op: "softmax_rows",
                    left: xv.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row, key_mask);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(x.0), &[x.0]))
    }

    /// Gathers rows of a 2-D value (embedding lookup when `x` is a table).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("select_rows")?;
        if idx.is_empty() {
            return Err(NeurankError::Contract("select_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NeurankError::Contract(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_parts(vec![idx.len(), n], data);
        Ok(self.push(out, Op::SelectRows { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(NeurankError::Contract(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NeurankError::Contract("concat_cols with no inputs".into()))?;
        let m = self.value(*first).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = self.value(*p).dims2("concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![m, total], data);
        Ok(self.push(out, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(NeurankError::Shape {
                op: "reshape",
                left: xv.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    /// Sliding windows of `n` consecutive rows, each flattened into one row:
    /// (len×h) → ((len−n+1)×(n·h)).
    pub fn unfold_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let (len, h) = xv.dims2("unfold_rows")?;
        if n == 0 || n > len {
            return Err(NeurankError::Contract(format!(
                "window {n} does not fit a sequence of {len} rows"
            )));
        }
        let windows = len - n + 1;
        let mut data = Vec::with_capacity(windows * n * h);
        for p in 0..windows {
            data.extend_from_slice(&xv.data()[p * h..(p + n) * h]);
        }
        let out = Tensor::from_parts(vec![windows, n * h], data);
        Ok(self.push(out, Op::Unfold { x: x.0, n }, &[x.0]))
    }

    /// All-pairs cosine similarity between rows of `a` (m×h) and `b` (n×h).
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, h) = av.dims2("cosine_matrix")?;
        let (n, h2) = bv.dims2("cosine_matrix")?;
        if h != h2 {
            return Err(shape_err("cosine_matrix", av, bv));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(kernels::cosine(av.row(i), bv.row(j)));
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::CosineMatrix { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Gaussian kernel pooling over a translation matrix `m` (rows = query side):
    /// `K_k = Σ_i ln max(Σ_j exp(−(m_ij − μ_k)² / 2σ_k²), floor)`.
    pub fn kernel_pool(&mut self, m: Var, mus: &[f64], sigmas: &[f64], floor: f64) -> Result<Var> {
        let mv = self.value(m);
        let (rows, cols) = mv.dims2("kernel_pool")?;
        if mus.len() != sigmas.len() || mus.is_empty() {
            return Err(NeurankError::Config("kernel bank means/widths mismatch".into()));
        }
        let mut feats = vec![0.0; mus.len()];
        for (k, (&mu, &sigma)) in mus.iter().zip(sigmas).enumerate() {
            for i in 0..rows {
                let s: f64 = mv.data()[i * cols..(i + 1) * cols]
                    .iter()
                    .map(|&x| (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp())
                    .sum();
                feats[k] += s.max(floor).ln();
            }
        }
        let out = Tensor::from_parts(vec![mus.len()], feats);
        let op = Op::KernelPool {
            m: m.0,
            mus: mus.to_vec(),
            sigmas: sigmas.to_vec(),
            floor,
        };
        Ok(self.push(out, op, &[m.0]))
    }

    /// Binary cross-entropy on `sigmoid(s)`, computed from the logit directly.
    pub fn bce_with_logits(&mut self, s: Var, label: f64) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(NeurankError::Contract("bce_with_logits expects a scalar score".into()));
        }
        let x = sv.data()[0];
        let loss = x.max(0.0) - x * label + (-x.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { s: s.0, label }, &[s.0]))
    }

    /// `max(0, margin − (pos − neg))`.
    pub fn hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        let (p, n) = (self.value(pos), self.value(neg));
        if p.numel() != 1 || n.numel() != 1 {
            return Err(NeurankError::Contract("hinge expects scalar scores".into()));
        }
        let raw = margin - (p.data()[0] - n.data()[0]);
        let op = Op::Hinge {
            pos: pos.0,
            neg: neg.0,
            active: raw > 0.0,
        };
        Ok(self.push(Tensor::scalar(raw.max(0.0)), op, &[pos.0, neg.0]))
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = lv.dims2("cross_entropy_rows")?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(NeurankError::Contract(format!(
                "cross_entropy_rows: {} targets for {m}×{n} logits",
                targets.len()
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / m as f64), op, &[logits.0]))
    }

    /// Inverted dropout. A rate of 0 records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NeurankError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let wants = |j: usize| nodes[j].needs_grad;
        let mut acc = |j: usize, f: &dyn Fn(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    acc(*a, &|buf| kernels::matmul_nt_acc(g, val(*b).data(), buf, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &|buf| kernels::matmul_tn_acc(val(*a).data(), g, buf, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if wants(*a) {
                    acc(*a, &|buf| kernels::matmul_acc(g, val(*b).data(), buf, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &|buf| kernels::matmul_tn_acc(g, val(*a).data(), buf, m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &|buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|buf| {
                    for t in 0..buf.len() {
                        buf[t] += g[t] * bv[t];
                    }
                });
                acc(*b, &|buf| {
                    for t in 0..buf.len() {
                        buf[t] += g[t] * av[t];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let cols = val(*a).cols();
                acc(*b, &|buf| {
                    for row in g.chunks(cols) {
                        buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::MulScalar { s, x } => {
                let c = val(*s).data()[0];
                let xv = val(*x).data();
                acc(*s, &|buf| buf[0] += kernels::dot(g, xv));
                acc(*x, &|buf| buf.iter_mut().zip(g).for_each(|(b, y)| *b += c * y));
            }
            Op::Sum(a) => acc(*a, &|buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Relu(a) => {
                let av = val(*a).data();
                acc(*a, &|buf| {
                    for t in 0..buf.len() {
                        if av[t] > 0.0 {
                            buf[t] += g[t];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a).data();
                acc(*a, &|buf| {
                    for t in 0..buf.len() {
                        buf[t] += g[t] * gelu_grad(av[t]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = nodes[i].value.data();
                acc(*a, &|buf| {
                    for t in 0..buf.len() {
                        buf[t] += g[t] * (1.0 - y[t] * y[t]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = val(*gain).numel();
                let gv = val(*gain).data();
                acc(*gain, &|buf| {
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            buf[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*bias, &|buf| {
                    for grow in g.chunks(h) {
                        buf.iter_mut().zip(grow).for_each(|(b, y)| *b += y);
                    }
                });
                acc(*x, &|buf| {
                    let nf = h as f64;
                    for (r, (grow, xrow)) in g.chunks(h).zip(xhat.chunks(h)).enumerate() {
                        let dxhat: Vec<f64> = (0..h).map(|j| grow[j] * gv[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xrow).map(|(d, x)| d * x).sum();
                        let out = &mut buf[r * h..(r + 1) * h];
                        for j in 0..h {
                            out[j] += rstd[r] / nf * (nf * dxhat[j] - sum_d - xrow[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                acc(*a, &|buf| {
                    for ((brow, yrow), grow) in buf.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let inner = kernels::dot(yrow, grow);
                        for j in 0..cols {
                            brow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let n = val(*x).cols();
                acc(*x, &|buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            buf[src * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let len = nodes[i].value.cols();
                acc(*x, &|buf| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for c in 0..len {
                            buf[r * n + start + c] += grow[c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &|buf| {
                        for (r, grow) in g.chunks(total).enumerate() {
                            for c in 0..w {
                                buf[r * w + c] += grow[offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Unfold { x, n } => {
                let h = val(*x).cols();
                let width = n * h;
                acc(*x, &|buf| {
                    for (p, grow) in g.chunks(width).enumerate() {
                        for (t, v) in grow.iter().enumerate() {
                            buf[p * h + t] += v;
                        }
                    }
                });
            }
            Op::CosineMatrix { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n, h) = (av.rows(), bv.rows(), av.cols());
                let norms_a: Vec<f64> = (0..m).map(|r| kernels::norm(av.row(r))).collect();
                let norms_b: Vec<f64> = (0..n).map(|r| kernels::norm(bv.row(r))).collect();
                let c = nodes[i].value.data();
                // d cos(u,v)/du = v/(|u||v|) − cos·u/|u|²
                acc(*a, &|buf| {
                    for r in 0..m {
                        for s in 0..n {
                            let (nu, nv) = (norms_a[r], norms_b[s]);
                            if nu == 0.0 || nv == 0.0 {
                                continue;
                            }
                            let gij = g[r * n + s];
                            let cij = c[r * n + s];
                            let (u, v) = (av.row(r), bv.row(s));
                            for t in 0..h {
                                buf[r * h + t] += gij * (v[t] / (nu * nv) - cij * u[t] / (nu * nu));
                            }
                        }
                    }
                });
                acc(*b, &|buf| {
                    for r in 0..m {
                        for s in 0..n {
                            let (nu, nv) = (norms_a[r], norms_b[s]);
                            if nu == 0.0 || nv == 0.0 {
                                continue;
                            }
                            let gij = g[r * n + s];
                            let cij = c[r * n + s];
                            let (u, v) = (av.row(r), bv.row(s));
                            for t in 0..h {
                                buf[s * h + t] += gij * (u[t] / (nu * nv) - cij * v[t] / (nv * nv));
                            }
                        }
                    }
                });
            }
            Op::KernelPool {
                m,
                mus,
                sigmas,
                floor,
            } => {
                let mv = val(*m);
                let (rows, cols) = (mv.rows(), mv.cols());
                acc(*m, &|buf| {
                    for (k, (&mu, &sigma)) in mus.iter().zip(sigmas).enumerate() {
                        let two_s2 = 2.0 * sigma * sigma;
                        for r in 0..rows {
                            let row = &mv.data()[r * cols..(r + 1) * cols];
                            let e: Vec<f64> = row.iter().map(|&x| (-(x - mu) * (x - mu) / two_s2).exp()).collect();
                            let s: f64 = e.iter().sum();
                            if s <= *floor {
                                continue;
                            }
                            for c in 0..cols {
                                buf[r * cols + c] += g[k] / s * e[c] * (-(row[c] - mu) / (sigma * sigma));
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { s, label } => {
                let x = val(*s).data()[0];
                acc(*s, &|buf| buf[0] += g[0] * (kernels::sigmoid(x) - label));
            }
            Op::Hinge { pos, neg, active } => {
                if *active {
                    acc(*pos, &|buf| buf[0] -= g[0]);
                    acc(*neg, &|buf| buf[0] += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(*logits).cols();
                let m = targets.len() as f64;
                acc(*logits, &|buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..n {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            buf[r * n + c] += g[0] * (probs[r * n + c] - onehot) / m;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|buf| {
                    for t in 0..buf.len() {
                        buf[t] += g[t] * mask[t];
                    }
                });
            }
        }
    }
}
