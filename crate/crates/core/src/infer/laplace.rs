//! Laplace approximation of a GP latent posterior with a non-zero prior mean.
//!
//! The mode of `log p(y | f) - 1/2 (f - m)^T K^-1 (f - m)` is found by damped
//! Newton iteration in the numerically stable `B = I + W^1/2 K W^1/2` form.
//! The approximate log marginal and its exact gradients with respect to `K`
//! and `m` (including the implicit dependence of the mode) are returned as
//! upstream grids so the caller can push them through the kernel and network
//! backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, JitterConfig, SpdMatrix};

pub const MAX_NEWTON_ITERATIONS: usize = 100;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Observation model on the latent function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentLikelihood {
    /// `p(y = 1 | f) = 1 / (1 + exp(-f))`, targets in `{0, 1}`.
    Bernoulli,
    Gaussian { noise_variance: f64 },
}

impl LatentLikelihood {
    fn log_lik(self, y: f64, f: f64) -> f64 {
        match self {
            LatentLikelihood::Bernoulli => {
                let z = (2.0 * y - 1.0) * f;
                -(f64::max(0.0, -z) + libm::log1p(libm::exp(-libm::fabs(z))))
            }
            LatentLikelihood::Gaussian { noise_variance } => {
                let r = y - f;
                -0.5 * r * r / noise_variance - 0.5 * (LN_2PI + libm::log(noise_variance))
            }
        }
    }

    fn grad(self, y: f64, f: f64) -> f64 {
        match self {
            LatentLikelihood::Bernoulli => y - logistic(f),
            LatentLikelihood::Gaussian { noise_variance } => (y - f) / noise_variance,
        }
    }

    /// Negative second derivative.
    fn curvature(self, f: f64) -> f64 {
        match self {
            LatentLikelihood::Bernoulli => {
                let p = logistic(f);
                p * (1.0 - p)
            }
            LatentLikelihood::Gaussian { noise_variance } => 1.0 / noise_variance,
        }
    }

    fn third(self, f: f64) -> f64 {
        match self {
            LatentLikelihood::Bernoulli => {
                let p = logistic(f);
                -p * (1.0 - p) * (1.0 - 2.0 * p)
            }
            LatentLikelihood::Gaussian { .. } => 0.0,
        }
    }
}

/// Gaussian approximation `N(f_hat, (K^-1 + W)^-1)` at the posterior mode.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    pub prior_mean: Vec<f64>,
    pub mode: Vec<f64>,
    /// `K^-1 (f_hat - m)`.
    pub alpha: Vec<f64>,
    /// `-d^2 log p(y | f) / df^2` at the mode.
    pub curvature: Vec<f64>,
    pub grad_log_lik: Vec<f64>,
    pub log_marginal: f64,
    pub iterations: usize,
    sqrt_w: Vec<f64>,
    b_factor: CholeskyFactor,
}

fn objective(alpha: &[f64], f: &[f64], m: &[f64], y: &[f64], lik: LatentLikelihood) -> f64 {
    let quad: f64 = alpha.iter().zip(f.iter().zip(m)).map(|(a, (fi, mi))| a * (fi - mi)).sum();
    let ll: f64 = y.iter().zip(f).map(|(yi, fi)| lik.log_lik(*yi, *fi)).sum();
    -0.5 * quad + ll
}

fn b_matrix(k: &SpdMatrix, sqrt_w: &[f64]) -> SpdMatrix {
    SpdMatrix::from_fn(k.dim(), |i, j| {
        sqrt_w[i] * k.get(i, j) * sqrt_w[j] + if i == j { 1.0 } else { 0.0 }
    })
}

/// Finds the posterior mode by damped Newton iteration.
pub fn laplace_mode(
    prior_mean: &[f64],
    prior_cov: &SpdMatrix,
    targets: &[f64],
    lik: LatentLikelihood,
    jitter: &JitterConfig,
) -> Result<LaplacePosterior> {
    let n = prior_cov.dim();
    for len in [prior_mean.len(), targets.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, found: len });
        }
    }
    let m = prior_mean;
    let mut f = m.to_vec();
    let mut alpha = vec![0.0; n];
    let mut psi = objective(&alpha, &f, m, targets, lik);
    let mut converged = false;
    let mut polish = 0;
    let mut iterations = 0;
    while iterations < MAX_NEWTON_ITERATIONS {
        iterations += 1;
        let w: Vec<f64> = f.iter().map(|fi| lik.curvature(*fi)).collect();
        let sqrt_w: Vec<f64> = w.iter().map(|v| libm::sqrt(*v)).collect();
        let b_factor = linalg::cholesky(&b_matrix(prior_cov, &sqrt_w), jitter)?;
        let b: Vec<f64> = (0..n)
            .map(|i| w[i] * (f[i] - m[i]) + lik.grad(targets[i], f[i]))
            .collect();
        let kb = prior_cov.mul_vec(&b);
        let c: Vec<f64> = sqrt_w.iter().zip(&kb).map(|(s, v)| s * v).collect();
        let z = linalg::chol_solve(&b_factor, &c)?;
        let newton: Vec<f64> = (0..n).map(|i| b[i] - sqrt_w[i] * z[i]).collect();

        let mut step = 1.0;
        let (next_alpha, next_f, next_psi) = loop {
            let a: Vec<f64> = alpha.iter().zip(&newton).map(|(a0, a1)| a0 + step * (a1 - a0)).collect();
            let mut fa = prior_cov.mul_vec(&a);
            fa.iter_mut().zip(m).for_each(|(v, mi)| *v += mi);
            let p = objective(&a, &fa, m, targets, lik);
            // near the mode the objective change is below rounding, so small
            // full steps are taken unconditionally
            let small = step == 1.0
                && fa.iter().zip(&f).all(|(a, b)| libm::fabs(a - b) <= 1e-6 * (1.0 + libm::fabs(*b)));
            if p >= psi || small || step < 1e-8 {
                break (a, fa, p);
            }
            step *= 0.5;
        };
        let delta = next_f.iter().zip(&f).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max);
        let scale = 1.0 + next_f.iter().map(|v| libm::fabs(*v)).fold(0.0, f64::max);
        alpha = next_alpha;
        f = next_f;
        psi = next_psi;
        if !psi.is_finite() {
            break;
        }
        // two extra Newton steps after the tolerance is met push the mode to
        // machine precision, which the log-determinant term is sensitive to
        if delta <= 1e-9 * scale {
            polish += 1;
            if polish > 2 || delta == 0.0 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NewtonDivergence(iterations));
    }
    let curvature: Vec<f64> = f.iter().map(|fi| lik.curvature(*fi)).collect();
    let sqrt_w: Vec<f64> = curvature.iter().map(|v| libm::sqrt(*v)).collect();
    let b_factor = linalg::cholesky(&b_matrix(prior_cov, &sqrt_w), jitter)?;
    let grad_log_lik = targets.iter().zip(&f).map(|(y, fi)| lik.grad(*y, *fi)).collect();
    let log_marginal = psi - 0.5 * linalg::log_det(&b_factor);
    Ok(LaplacePosterior {
        prior_mean: m.to_vec(),
        mode: f,
        alpha,
        curvature,
        grad_log_lik,
        log_marginal,
        iterations,
        sqrt_w,
        b_factor,
    })
}

impl LaplacePosterior {
    /// Latent predictive mean and variance at a query with prior mean `m_q`,
    /// prior variance `k_qq` and cross-covariance `k_q` to the training points.
    pub fn latent_predictive(&self, k_q: &[f64], k_qq: f64, m_q: f64) -> Result<(f64, f64)> {
        if k_q.len() != self.mode.len() {
            return Err(Error::DimensionMismatch { expected: self.mode.len(), found: k_q.len() });
        }
        let mean = m_q + k_q.iter().zip(&self.alpha).map(|(k, a)| k * a).sum::<f64>();
        let v: Vec<f64> = k_q.iter().zip(&self.sqrt_w).map(|(k, s)| k * s).collect();
        let sol = linalg::chol_solve(&self.b_factor, &v)?;
        let var = k_qq - v.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>();
        Ok((mean, var))
    }

    /// Gradients of the approximate log marginal with respect to every entry of
    /// the prior covariance (row-major grid) and of the prior mean.
    pub fn marginal_gradients(
        &self,
        prior_cov: &SpdMatrix,
        _targets: &[f64],
        lik: LatentLikelihood,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.mode.len();
        let b_inv = self.b_factor.inverse();
        // R = W^1/2 B^-1 W^1/2 = (K + W^-1)^-1
        let r = SpdMatrix::from_fn(n, |i, j| self.sqrt_w[i] * b_inv.get(i, j) * self.sqrt_w[j]);
        let mut s2 = vec![0.0; n];
        for i in 0..n {
            // diag(K R K)
            let mut krk = 0.0;
            for a in 0..n {
                let mut rk = 0.0;
                for b in 0..n {
                    rk += r.get(a, b) * prior_cov.get(b, i);
                }
                krk += prior_cov.get(i, a) * rk;
            }
            s2[i] = 0.5 * (prior_cov.get(i, i) - krk) * lik.third(self.mode[i]);
        }
        let ks2 = prior_cov.mul_vec(&s2);
        let rks2 = r.mul_vec(&ks2);
        let u: Vec<f64> = s2.iter().zip(&rks2).map(|(a, b)| a - b).collect();
        let g = &self.grad_log_lik;
        let a = &self.alpha;
        let mut d_k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d_k[i * n + j] = 0.5 * (a[i] * a[j] - r.get(i, j)) + 0.5 * (u[i] * g[j] + g[i] * u[j]);
            }
        }
        let d_mu = a.iter().zip(&u).map(|(x, y)| x + y).collect();
        Ok((d_k, d_mu))
    }
}

/// `E[sigmoid(f)]` for `f ~ N(mean, variance)` by composite Simpson quadrature
/// over `mean +- 10 sd`.
pub fn logistic_gaussian_expectation(mean: f64, variance: f64) -> f64 {
    if variance <= 1e-16 {
        return logistic(mean);
    }
    const INTERVALS: usize = 400;
    let sd = libm::sqrt(variance);
    let half = 10.0 * sd;
    let h = 2.0 * half / INTERVALS as f64;
    let norm = 1.0 / (sd * libm::sqrt(2.0 * core::f64::consts::PI));
    // odd part of the logistic, summed in mirrored pairs so a zero mean gives exactly one half
    let integrand = |x: f64| {
        let z = (x - mean) / sd;
        0.5 * libm::tanh(0.5 * x) * norm * libm::exp(-0.5 * z * z)
    };
    let pair = |o: f64| integrand(mean - o) + integrand(mean + o);
    let mut acc = pair(half) + 2.0 * integrand(mean);
    for k in 1..INTERVALS / 2 {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pair(half - k as f64 * h);
    }
    0.5 + acc * h / 3.0
}

/// Closed-form probit-style approximation `sigmoid(mean / sqrt(1 + pi var / 8))`.
pub fn probit_approximation(mean: f64, variance: f64) -> f64 {
    logistic(mean / libm::sqrt(1.0 + core::f64::consts::PI * variance / 8.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov2(a: f64, b: f64, c: f64) -> SpdMatrix {
        SpdMatrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap()
    }

    #[test]
    fn gaussian_likelihood_matches_exact_regression() {
        let k = cov2(1.2, 0.4, 0.9);
        let m = [0.3, -0.1];
        let y = [1.0, 0.5];
        let noise = 0.25;
        let post = laplace_mode(&m, &k, &y, LatentLikelihood::Gaussian { noise_variance: noise }, &JitterConfig::none()).unwrap();
        let ky = cov2(1.2 + noise, 0.4, 0.9 + noise);
        let f = linalg::cholesky(&ky, &JitterConfig::none()).unwrap();
        let alpha = linalg::chol_solve(&f, &[y[0] - m[0], y[1] - m[1]]).unwrap();
        let kq = [0.5, 0.2];
        let (mean, var) = post.latent_predictive(&kq, 1.1, 0.05).unwrap();
        let exact_mean = 0.05 + kq[0] * alpha[0] + kq[1] * alpha[1];
        let v = linalg::chol_solve(&f, &kq).unwrap();
        let exact_var = 1.1 - (kq[0] * v[0] + kq[1] * v[1]);
        assert!((mean - exact_mean).abs() < 1e-12);
        assert!((var - exact_var).abs() < 1e-12);
        let quad: f64 = alpha.iter().zip([y[0] - m[0], y[1] - m[1]]).map(|(a, r)| a * r).sum();
        let exact_lml = -0.5 * quad - 0.5 * linalg::log_det(&f) - LN_2PI;
        assert!((post.log_marginal - exact_lml).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_mode_is_stationary() {
        let k = cov2(2.0, 1.5, 2.0);
        let m = [0.2, -0.4];
        let y = [1.0, 0.0];
        let post = laplace_mode(&m, &k, &y, LatentLikelihood::Bernoulli, &JitterConfig::none()).unwrap();
        // at the mode K^-1 (f - m) = grad log p(y | f)
        for i in 0..2 {
            assert!((post.alpha[i] - post.grad_log_lik[i]).abs() < 1e-9);
        }
        assert!(post.iterations < 20);
    }

    #[test]
    fn expectation_limits() {
        assert_eq!(logistic_gaussian_expectation(0.0, 1e-20), 0.5);
        assert!((logistic_gaussian_expectation(0.0, 3.0) - 0.5).abs() < 1e-14);
        assert!(logistic_gaussian_expectation(10.0, 1e-6) > 0.99);
        assert!((probit_approximation(0.0, 5.0) - 0.5).abs() < 1e-15);
    }
}
