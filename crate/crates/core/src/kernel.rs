//! ARD squared exponential covariance on embedded inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::nn::Embedding;

/// Per-patient kernel hyperparameters, all stored as natural logs.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

/// Gradients share the layout of the parameters they differentiate.
pub type KernelParamGradients = KernelParams;

impl KernelParams {
    /// Unit length-scales, unit signal variance and noise variance 0.1.
    pub fn defaults(dim: usize) -> Self {
        Self {
            log_lengthscales: vec![0.0; dim],
            log_signal_variance: 0.0,
            log_noise_variance: libm::log(0.1),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { log_lengthscales: vec![0.0; dim], log_signal_variance: 0.0, log_noise_variance: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        libm::exp(self.log_signal_variance)
    }

    pub fn noise_variance(&self) -> f64 {
        libm::exp(self.log_noise_variance)
    }

    /// Number of scalar entries in the flat view.
    pub fn len(&self) -> usize {
        self.dim() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view: length-scales, then signal variance, then noise variance.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch { params: self.len(), grads: flat.len() });
        }
        let d = self.dim();
        self.log_lengthscales.copy_from_slice(&flat[..d]);
        self.log_signal_variance = flat[d];
        self.log_noise_variance = flat[d + 1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of several parameter sets in log space.
    pub fn log_mean<'a>(items: impl IntoIterator<Item = &'a KernelParams>) -> Option<Self> {
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for p in items {
            let flat = p.to_flat();
            match acc.as_mut() {
                None => acc = Some(flat),
                Some(a) => a.iter_mut().zip(&flat).for_each(|(x, y)| *x += y),
            }
            count += 1;
        }
        let mut acc = acc?;
        acc.iter_mut().for_each(|x| *x /= count as f64);
        let mut out = Self::zeros(acc.len() - 2);
        out.set_flat(&acc).ok()?;
        Some(out)
    }

    fn inverse_squared_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| libm::exp(-2.0 * l)).collect()
    }
}

fn rbf_unchecked(h1: &[f64], h2: &[f64], inv_sq: &[f64], signal: f64) -> f64 {
    let mut q = 0.0;
    for d in 0..inv_sq.len() {
        let r = h1[d] - h2[d];
        q += r * r * inv_sq[d];
    }
    signal * libm::exp(-0.5 * q)
}

/// `sigma_f^2 exp(-1/2 sum_d (h1_d - h2_d)^2 / l_d^2)`. Observation noise is not included.
pub fn rbf_ard(h1: &[f64], h2: &[f64], p: &KernelParams) -> Result<f64> {
    for h in [h1, h2] {
        if h.len() != p.dim() {
            return Err(Error::DimensionMismatch { expected: p.dim(), found: h.len() });
        }
    }
    Ok(rbf_unchecked(h1, h2, &p.inverse_squared_lengthscales(), p.signal_variance()))
}

/// Cross-covariance between each of `hs` and `query`.
pub(crate) fn cross_covariance(hs: &[Vec<f64>], query: &[f64], p: &KernelParams) -> Result<Vec<f64>> {
    hs.iter().map(|h| rbf_ard(h, query, p)).collect()
}

/// Noise-free RBF Gram matrix over raw vectors.
pub(crate) fn rbf_matrix(hs: &[Vec<f64>], p: &KernelParams) -> Result<SpdMatrix> {
    for h in hs {
        if h.len() != p.dim() {
            return Err(Error::DimensionMismatch { expected: p.dim(), found: h.len() });
        }
    }
    let inv_sq = p.inverse_squared_lengthscales();
    let signal = p.signal_variance();
    Ok(SpdMatrix::from_fn(hs.len(), |i, j| {
        if i == j {
            signal
        } else {
            rbf_unchecked(&hs[i], &hs[j], &inv_sq, signal)
        }
    }))
}

pub(crate) fn noisy_matrix(hs: &[Vec<f64>], p: &KernelParams) -> Result<SpdMatrix> {
    let mut k = rbf_matrix(hs, p)?;
    k.add_diagonal(&vec![p.noise_variance(); hs.len()]);
    Ok(k)
}

/// `K[t][t'] = rbf_ard(h_t, h_t') + delta_tt' sigma_n^2`.
pub fn kernel_matrix(emb: &Embedding, p: &KernelParams) -> Result<SpdMatrix> {
    noisy_matrix(emb.vectors(), p)
}

/// Gradients of `sum_{t,t'} upstream[t][t'] K[t][t']` with respect to the
/// log hyperparameters and to every embedding vector. `upstream` is the
/// row-major `T x T` grid.
pub fn kernel_grads(
    emb: &Embedding,
    p: &KernelParams,
    upstream: &[f64],
) -> Result<(KernelParamGradients, Vec<Vec<f64>>)> {
    let hs = emb.vectors();
    let t = hs.len();
    if upstream.len() != t * t {
        return Err(Error::DimensionMismatch { expected: t * t, found: upstream.len() });
    }
    for h in hs {
        if h.len() != p.dim() {
            return Err(Error::DimensionMismatch { expected: p.dim(), found: h.len() });
        }
    }
    let dim = p.dim();
    let inv_sq = p.inverse_squared_lengthscales();
    let signal = p.signal_variance();
    let mut grads = KernelParams::zeros(dim);
    let mut dh = vec![vec![0.0; dim]; t];
    let mut trace = 0.0;
    for a in 0..t {
        let uaa = upstream[a * t + a];
        trace += uaa;
        grads.log_signal_variance += uaa * signal;
        for b in 0..a {
            let u = upstream[a * t + b] + upstream[b * t + a];
            if u == 0.0 {
                continue;
            }
            let k = rbf_unchecked(&hs[a], &hs[b], &inv_sq, signal);
            grads.log_signal_variance += u * k;
            for d in 0..dim {
                let r = hs[a][d] - hs[b][d];
                let r2 = r * r * inv_sq[d];
                grads.log_lengthscales[d] += u * k * r2;
                let g = u * k * r * inv_sq[d];
                dh[a][d] -= g;
                dh[b][d] += g;
            }
        }
    }
    grads.log_noise_variance = p.noise_variance() * trace;
    Ok((grads, dh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> KernelParams {
        KernelParams { log_lengthscales: vec![0.0], log_signal_variance: 0.0, log_noise_variance: 0.0 }
    }

    #[test]
    fn rbf_values() {
        let p = KernelParams { log_signal_variance: libm::log(2.5), ..unit() };
        assert_eq!(rbf_ard(&[0.3], &[0.3], &p).unwrap(), 2.5);
        let v = rbf_ard(&[0.0], &[core::f64::consts::SQRT_2], &unit()).unwrap();
        assert!((v - 0.367879).abs() < 1e-6);
        assert!(matches!(rbf_ard(&[0.0, 1.0], &[0.0], &unit()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ard_long_lengthscale_drops_dimension() {
        let p2 = KernelParams {
            log_lengthscales: vec![0.2, libm::log(1e6)],
            log_signal_variance: 0.1,
            log_noise_variance: 0.0,
        };
        let p1 = KernelParams { log_lengthscales: vec![0.2], ..p2.clone() };
        let full = rbf_ard(&[0.5, -1.0], &[1.2, 2.0], &p2).unwrap();
        let reduced = rbf_ard(&[0.5], &[1.2], &p1).unwrap();
        assert!((full - reduced).abs() < 1e-6);
    }

    #[test]
    fn small_matrices() {
        let p = KernelParams { log_lengthscales: vec![0.0], log_signal_variance: libm::log(2.0), log_noise_variance: libm::log(0.5) };
        let k = kernel_matrix(&Embedding::from_vectors(vec![vec![1.0]]), &p).unwrap();
        assert!((k.get(0, 0) - 2.5).abs() < 1e-15);
        let k = kernel_matrix(&Embedding::from_vectors(vec![vec![1.0], vec![1.0]]), &p).unwrap();
        assert!((k.get(0, 0) - 2.5).abs() < 1e-15 && (k.get(1, 1) - 2.5).abs() < 1e-15);
        assert!((k.get(0, 1) - 2.0).abs() < 1e-15 && (k.get(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_gradient_is_scaled_trace() {
        let p = KernelParams { log_lengthscales: vec![0.1, -0.3], log_signal_variance: 0.2, log_noise_variance: -1.0 };
        let emb = Embedding::from_vectors(vec![vec![0.1, 0.2], vec![-0.4, 0.9], vec![1.0, 0.0]]);
        let up = [0.3, 0.1, -0.2, 0.1, -0.7, 0.5, -0.2, 0.5, 1.1];
        let (g, _) = kernel_grads(&emb, &p, &up).unwrap();
        assert!((g.log_noise_variance - p.noise_variance() * (0.3 - 0.7 + 1.1)).abs() < 1e-15);
        let (g, dh) = kernel_grads(&emb, &p, &[0.0; 9]).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(dh.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn log_mean_of_params() {
        let a = KernelParams { log_lengthscales: vec![1.0], log_signal_variance: 2.0, log_noise_variance: -2.0 };
        let b = KernelParams { log_lengthscales: vec![3.0], log_signal_variance: 0.0, log_noise_variance: 0.0 };
        let m = KernelParams::log_mean([&a, &b]).unwrap();
        assert_eq!(m.to_flat(), vec![2.0, 1.0, -1.0]);
        assert!(KernelParams::log_mean(core::iter::empty()).is_none());
    }
}
