//! Dense symmetric positive definite linear algebra.
//!
//! Only three operations are public: [`cholesky`], [`chol_solve`] and
//! [`log_det`]. Everything the likelihood and inference code needs beyond that
//! is built from them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A symmetric matrix stored densely in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SpdMatrix {
    /// Builds a matrix from `f(row, col)` evaluated on the lower triangle and
    /// mirrored, so the result is symmetric by construction.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                entries[i * dim + j] = v;
                entries[j * dim + i] = v;
            }
        }
        Self { dim, entries }
    }

    /// Builds a matrix from explicit rows; rows must form an exactly symmetric square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
            entries.extend_from_slice(row);
        }
        for i in 0..dim {
            for j in 0..i {
                if entries[i * dim + j] != entries[j * dim + i] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub(crate) fn add_diagonal(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.entries[i * self.dim + i] += v;
        }
    }

    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.dim.max(1))
            .take(self.dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mean_diagonal(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        (0..self.dim).map(|i| self.get(i, i)).sum::<f64>() / self.dim as f64
    }
}

/// Escalation ladder of diagonal jitter, expressed as multiples of the mean
/// diagonal entry. Rungs are tried in order until factorization succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterConfig {
    pub ladder: Vec<f64>,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { ladder: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4] }
    }
}

impl JitterConfig {
    /// Plain factorization with no jitter.
    pub fn none() -> Self {
        Self { ladder: vec![0.0] }
    }
}

/// Lower-triangular Cholesky factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry of the lower factor (zero above the diagonal).
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.lower[row * self.dim + col]
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn forward(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    fn backward(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = 0.0;
            for k in i + 1..n {
                s += self.lower[k * n + i] * b[k];
            }
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Dense inverse of the factored matrix, one solve per column.
    pub(crate) fn inverse(&self) -> SpdMatrix {
        let n = self.dim;
        let mut cols = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.forward(&mut e);
            self.backward(&mut e);
            for i in 0..n {
                cols[i * n + j] = e[i];
            }
        }
        // Average the two triangles so the result is exactly symmetric.
        SpdMatrix::from_fn(n, |i, j| 0.5 * (cols[i * n + j] + cols[j * n + i]))
    }
}

fn factor_once(m: &SpdMatrix, jitter: f64) -> Option<Vec<f64>> {
    let n = m.dim;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Factors `m + jitter * I` using the first rung of the ladder that succeeds.
pub fn cholesky(m: &SpdMatrix, jitter_policy: &JitterConfig) -> Result<CholeskyFactor> {
    if m.dim == 0 {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    let scale = m.mean_diagonal().abs();
    let mut max_jitter = 0.0;
    for &rung in &jitter_policy.ladder {
        let jitter = rung * scale;
        max_jitter = jitter;
        if let Some(lower) = factor_once(m, jitter) {
            return Ok(CholeskyFactor { dim: m.dim, lower, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { dim: m.dim, max_jitter })
}

/// Solves `(L L^T) x = b` by forward then back substitution.
pub fn chol_solve(f: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != f.dim {
        return Err(Error::DimensionMismatch { expected: f.dim, found: b.len() });
    }
    let mut x = b.to_vec();
    f.forward(&mut x);
    f.backward(&mut x);
    Ok(x)
}

/// `log |L L^T| = 2 sum_d ln L_dd`.
pub fn log_det(f: &CholeskyFactor) -> f64 {
    2.0 * (0..f.dim).map(|d| libm::log(f.get(d, d))).sum::<f64>()
}
