//! Dense f64 tensors and the reverse-mode tape built on them.
//!
//! Shapes are limited to what the model needs: scalars, vectors, and
//! row-major matrices. No broadcasting.

mod adam;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{masked_softmax_values, NodeId, Tape};

use crate::{Error, Result};

/// Dense row-major tensor. Rank 0 (scalar), 1 (vector), or 2 (matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension {
                op: "tensor_new",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        if shape.len() > 2 {
            return Err(Error::Dimension {
                op: "tensor_new",
                detail: format!("rank {} unsupported", shape.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows for a matrix, length for a vector, 1 for a scalar.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────
//
// Plain slice kernels used by both the forward ops and their VJPs.
// `c` is accumulated into, callers zero it first when needed.

/// C += A @ B  (A: m×k, B: k×n, C: m×n)
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in arow.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += a_it * brow[j];
            }
        }
    }
}

/// C += A @ B^T  (A: m×k, B: n×k, C: m×n)
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            c[i * n + j] += s;
        }
    }
}

/// C += A^T @ B  (A: m×k, B: m×n, C: k×n)
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &a_it) in arow.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += a_it * brow[j];
            }
        }
    }
}

/// y += A @ x  (A: m×k, x: k, y: m)
pub fn mv(a: &[f64], x: &[f64], y: &mut [f64], m: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(y.len(), m);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut s = 0.0;
        for t in 0..k {
            s += arow[t] * x[t];
        }
        y[i] += s;
    }
}

/// y += A^T @ x  (A: m×k, x: m, y: k)
pub fn mv_t(a: &[f64], x: &[f64], y: &mut [f64], m: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(x.len(), m);
    debug_assert_eq!(y.len(), k);
    for i in 0..m {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let arow = &a[i * k..(i + 1) * k];
        for t in 0..k {
            y[t] += xi * arow[t];
        }
    }
}

/// Sum of values in a canonical (sorted) order so the result is independent
/// of the caller's element ordering. Used where graph relabelings must not
/// perturb reductions at the bit level.
pub fn stable_sum(values: &[f64]) -> f64 {
    if values.len() <= 2 {
        return values.iter().sum();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.iter().sum()
}
