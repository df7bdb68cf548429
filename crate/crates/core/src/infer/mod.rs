//! Adapting to a new patient and predicting with the shared networks frozen.

pub mod laplace;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams};
use crate::linalg;
use crate::model::{evaluate_patient, DmeGpModel, Likelihood, PatientParams, PatientSeries};
use crate::nn::{Embedding, ParamView};
use crate::train::{adam_step, AdamConfig, OptimizerState};

use laplace::LatentLikelihood;

/// Variances in `(-NEGATIVE_VARIANCE_TOLERANCE, 0)` are rounded to zero.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;

/// Starting point for a new patient's kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaInit {
    KernelDefaults,
    /// Element-wise mean of the trained log-space kernels.
    CohortMean,
}

impl ThetaInit {
    pub fn label(self) -> &'static str {
        match self {
            ThetaInit::KernelDefaults => "kernel-defaults",
            ThetaInit::CohortMean => "cohort-mean",
        }
    }
}

impl core::str::FromStr for ThetaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel-defaults" => Ok(ThetaInit::KernelDefaults),
            "cohort-mean" => Ok(ThetaInit::CohortMean),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown theta init `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub init: ThetaInit,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self { steps: 50, optimizer: AdamConfig { learning_rate: 0.05, ..AdamConfig::default() }, init: ThetaInit::CohortMean }
    }
}

/// Result of [`adapt_new_patient`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub params: PatientParams,
    /// History log marginal at the initial and returned parameters.
    pub initial_log_marginal: f64,
    pub log_marginal: f64,
    /// Set when a numerical failure cut adaptation short.
    pub warning: bool,
}

/// Initial parameters for an unseen patient under `init`.
pub fn initial_params(model: &DmeGpModel, init: ThetaInit) -> PatientParams {
    let mut p = model.default_patient();
    if let Some(k) = &model.shared_kernel {
        p.kernel = k.clone();
    } else if init == ThetaInit::CohortMean {
        p.kernel = model.cohort_mean_kernel();
    }
    p
}

/// Adam ascent on the history's log marginal with the shared networks frozen.
///
/// In p-gps mode the patient's own embedding is adapted together with its
/// kernel. Modes with a shared kernel have nothing to adapt. The best iterate
/// seen is returned, so the result never scores below the initialization.
pub fn adapt_new_patient(history: &PatientSeries, model: &DmeGpModel, cfg: &AdaptationConfig) -> Result<Adapted> {
    let init = initial_params(model, cfg.init);
    let skip = cfg.steps == 0 || history.is_empty() || model.config.sharing.shares_kernel();
    let initial = match evaluate_patient(history, model, &init, false) {
        Ok((v, _)) => v,
        Err(e) if is_numerical(&e) => {
            log::warn!("patient `{}`: initial parameters are numerically invalid: {e}", history.id);
            return Ok(Adapted { params: init, initial_log_marginal: f64::NEG_INFINITY, log_marginal: f64::NEG_INFINITY, warning: true });
        }
        Err(e) => return Err(e),
    };
    let mut out = Adapted { params: init.clone(), initial_log_marginal: initial, log_marginal: initial, warning: false };
    if skip {
        return Ok(out);
    }
    let mut current = init;
    let mut flat = flatten(&current);
    let mut state = OptimizerState::new(cfg.optimizer.clone(), flat.len());
    for step in 0..=cfg.steps {
        let (value, grads) = match evaluate_patient(history, model, &current, step < cfg.steps) {
            Ok(r) => r,
            Err(e) if is_numerical(&e) => {
                log::warn!("patient `{}`: adaptation stopped at step {step}: {e}", history.id);
                out.warning = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if value > out.log_marginal {
            out.log_marginal = value;
            out.params = current.clone();
        }
        let Some(g) = grads else { break };
        let mut gflat = g.kernel.to_flat();
        if current.embedding.is_some() {
            gflat.extend(g.embedding.to_flat());
        }
        adam_step(&mut state, &mut flat, &gflat)?;
        unflatten(&mut current, &flat)?;
    }
    Ok(out)
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. } | Error::NewtonDivergence(_))
}

fn flatten(p: &PatientParams) -> Vec<f64> {
    let mut v = p.kernel.to_flat();
    if let Some(e) = &p.embedding {
        v.extend(e.to_flat());
    }
    v
}

fn unflatten(p: &mut PatientParams, flat: &[f64]) -> Result<()> {
    let nk = p.kernel.len();
    p.kernel.set_flat(&flat[..nk])?;
    if let Some(e) = &mut p.embedding {
        e.set_flat(&flat[nk..])?;
    }
    Ok(())
}

/// Predictive summary at one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    /// Predictive mean of `y`; the class probability under a Bernoulli likelihood.
    pub mean: f64,
    /// Variance of `y` including observation noise; `p (1 - p)` under a Bernoulli likelihood.
    pub variance: f64,
    pub latent_mean: f64,
    /// Variance of the latent function, without observation noise for regression.
    pub latent_variance: f64,
    /// Mean-function value at the query, ignoring the history.
    pub trend: f64,
    pub class_probability: Option<f64>,
    /// Closed-form `sigmoid(m / sqrt(1 + pi v / 8))`, kept for comparison.
    pub probit_probability: Option<f64>,
    /// Set when the Laplace mode search failed and the prior was used instead.
    pub warning: bool,
}

impl PredictiveDistribution {
    pub fn std_dev(&self) -> f64 {
        libm::sqrt(self.variance)
    }
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -NEGATIVE_VARIANCE_TOLERANCE {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(v))
    }
}

/// Predicts the step after `history.len()` observations, given that step's
/// embedding. `emb` and `trend` cover at least `history.len() + 1` steps.
fn predict_at(
    emb: &Embedding,
    trend: &[f64],
    targets: &[f64],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<PredictiveDistribution> {
    let n = targets.len();
    let theta = &params.kernel;
    let hs = emb.vectors();
    let query = &hs[n];
    let signal = theta.signal_variance();
    let noise = theta.noise_variance();
    let m_q = trend[n];
    match model.config.likelihood {
        Likelihood::Gaussian => {
            let (mean, f_var) = if n == 0 {
                (m_q, signal)
            } else {
                let hist = emb.truncated(n);
                let k = kernel::kernel_matrix(&hist, theta)?;
                let factor = linalg::cholesky(&k, &model.config.jitter)?;
                let resid: Vec<f64> = targets.iter().zip(trend).map(|(y, m)| y - m).collect();
                let alpha = linalg::chol_solve(&factor, &resid)?;
                let k_q = kernel::cross_covariance(&hs[..n], query, theta)?;
                let v = linalg::chol_solve(&factor, &k_q)?;
                let mean = m_q + dot(&k_q, &alpha);
                (mean, signal - dot(&k_q, &v))
            };
            let variance = clamp_variance(f_var + noise)?;
            Ok(PredictiveDistribution {
                mean,
                variance,
                latent_mean: mean,
                latent_variance: clamp_variance(f_var).unwrap_or(0.0),
                trend: m_q,
                class_probability: None,
                probit_probability: None,
                warning: false,
            })
        }
        Likelihood::Bernoulli => {
            let prior = (m_q, signal + noise);
            let (lm, lv, warning) = if n == 0 {
                (prior.0, prior.1, false)
            } else {
                let hist = emb.truncated(n);
                let k = kernel::kernel_matrix(&hist, theta)?;
                match laplace::laplace_mode(&trend[..n], &k, targets, LatentLikelihood::Bernoulli, &model.config.jitter) {
                    Ok(post) => {
                        let k_q = kernel::cross_covariance(&hs[..n], query, theta)?;
                        let (m, v) = post.latent_predictive(&k_q, signal + noise, m_q)?;
                        (m, v, false)
                    }
                    Err(Error::NewtonDivergence(it)) => {
                        log::warn!("Laplace mode search did not converge after {it} iterations; using the prior");
                        (prior.0, prior.1, true)
                    }
                    Err(e) => return Err(e),
                }
            };
            let lv = clamp_variance(lv)?;
            let p = laplace::logistic_gaussian_expectation(lm, lv);
            Ok(PredictiveDistribution {
                mean: p,
                variance: p * (1.0 - p),
                latent_mean: lm,
                latent_variance: lv,
                trend: m_q,
                class_probability: Some(p),
                probit_probability: Some(laplace::probit_approximation(lm, lv)),
                warning,
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn joint_forward(
    inputs: &[Vec<f64>],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<(Embedding, Vec<f64>)> {
    let emb = model.embedding_for(params).embed(inputs)?;
    let trend = model.mean_values(&emb)?;
    Ok((emb, trend))
}

fn predict_query(
    history: &PatientSeries,
    query_input: &[f64],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<PredictiveDistribution> {
    let mut inputs = history.inputs.clone();
    inputs.push(query_input.to_vec());
    let (emb, trend) = joint_forward(&inputs, params, model)?;
    predict_at(&emb, &trend, &history.targets, params, model)
}

/// Exact GP predictive distribution of `y` at `query_input` after `history`.
///
/// History and query are embedded as one sequence, so a recurrent embedding
/// of the query conditions on the history inputs.
pub fn predict_regression(
    history: &PatientSeries,
    query_input: &[f64],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<PredictiveDistribution> {
    if model.config.likelihood != Likelihood::Gaussian {
        return Err(Error::InvalidConfig("regression prediction needs a gaussian likelihood".into()));
    }
    predict_query(history, query_input, params, model)
}

/// Laplace-approximate class probability at `query_input` after a binary `history`.
///
/// The probability is `E[sigmoid(f)]` under the latent predictive Gaussian,
/// integrated numerically; the closed-form probit value is reported alongside.
pub fn predict_classification(
    history: &PatientSeries,
    query_input: &[f64],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<PredictiveDistribution> {
    if model.config.likelihood != Likelihood::Bernoulli {
        return Err(Error::InvalidConfig("classification needs a bernoulli likelihood".into()));
    }
    predict_query(history, query_input, params, model)
}

/// One-step-ahead predictions: step `t` conditions on steps before `t` only.
pub fn sequential_forecast(
    series: &PatientSeries,
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<Vec<PredictiveDistribution>> {
    let (emb, trend) = joint_forward(&series.inputs, params, model)?;
    (0..series.len())
        .map(|t| predict_at(&emb, &trend, &series.targets[..t], params, model))
        .collect()
}

/// Predictions at every step of `queries`, each conditioning on all of `history`.
pub fn forecast_after(
    history: &PatientSeries,
    queries: &[Vec<f64>],
    params: &PatientParams,
    model: &DmeGpModel,
) -> Result<Vec<PredictiveDistribution>> {
    queries.iter().map(|q| predict_query(history, q, params, model)).collect()
}

/// Convenience: the kernel part of [`adapt_new_patient`].
pub fn adapted_kernel(history: &PatientSeries, model: &DmeGpModel, cfg: &AdaptationConfig) -> Result<KernelParams> {
    Ok(adapt_new_patient(history, model, cfg)?.params.kernel)
}
