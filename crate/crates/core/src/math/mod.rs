//! Dense f64 arithmetic shared by every other module.
//!
//! Vectors are plain `&[f64]` / `Vec<f64>`; [`Mat`] is a small row-major
//! matrix used for weight storage in the classifiers.

mod adamw;
mod rng;

pub use adamw::{AdamWConfig, AdamWState};
pub use rng::{gaussian_sample, Rng};

use thiserror::Error;

/// Norms below this are treated as zero by the normalizing operations.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("input vector has (near) zero norm: {norm:e}")]
    ZeroNormInput { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `out += scale * x`
pub fn axpy(out: &mut [f64], scale: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

pub fn scaled(x: &[f64], scale: f64) -> Vec<f64> {
    x.iter().map(|v| v * scale).collect()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Element-wise mean of equally sized vectors.
pub fn mean_vector<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    let dim = vectors.first().map(|v| v.as_ref().len()).unwrap_or(0);
    let mut acc = vec![0.0; dim];
    for v in vectors {
        axpy(&mut acc, 1.0, v.as_ref());
    }
    let inv = 1.0 / vectors.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MathError> {
    if a.len() != b.len() {
        return Err(MathError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n >= ZERO_NORM_EPS) {
            return Err(MathError::ZeroNormInput { norm: n });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize_to_sphere(v: &[f64]) -> Result<Vec<f64>, MathError> {
    let n = norm(v);
    if !(n > ZERO_NORM_EPS) {
        return Err(MathError::ZeroNormInput { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        if rows * cols != data.len() {
            return Err(MathError::DimMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(&mut out, yr, self.row(r));
        }
        out
    }

    /// `self += scale * u v^T`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            axpy(self.row_mut(r), scale * ur, v);
        }
    }
}

/// Mean and sample standard deviation (n-1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
