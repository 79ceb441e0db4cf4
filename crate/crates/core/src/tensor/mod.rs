//! Dense `f64` tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain value type. Differentiable computation goes through a
//! [`Tape`]: leaves are registered on it, every primitive appends a node, and
//! [`Tape::backward`] replays the adjoints in reverse recording order. Named
//! model parameters live in a [`ParamSet`] and are bound onto a tape per step.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bindings, ParamSet};
pub use tape::{Gradients, Tape, Var};

use crate::error::{NeurankError, Result};

/// Default epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NeurankError::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NeurankError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose shape/data agreement was established by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Tensor::from_parts(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(NeurankError::Shape {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(NeurankError::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(NeurankError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        kernels::softmax_in_place(row, None);
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Normalizes every position over the last dimension, then applies `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let h = x.cols();
    if gain.numel() != h || bias.numel() != h {
        return Err(NeurankError::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(h).zip(out.chunks_mut(h)) {
        let (xhat, _) = kernels::normalize(src, eps);
        for j in 0..h {
            dst[j] = gain.data[j] * xhat[j] + bias.data[j];
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| kernels::gelu(v)).collect())
}

/// Cosine similarity; a zero-norm operand yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    kernels::cosine(u, v)
}
