//! Per-patient marginal likelihoods and their gradients.
//!
//! Each patient's targets are modelled as
//! `y_i ~ N(mu(H_i | w), K_i(H_i | theta_i))` with `H_i = phi(X_i | v)`, so the
//! cohort objective is a plain sum of independent per-patient terms. Gradients
//! flow through `dL/dK = (alpha alpha^T - K^-1) / 2` and `dL/dmu = alpha`, where
//! `alpha = K^-1 (y - mu)`, into the kernel and network backward passes.

mod reference;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::infer::laplace::{self, LatentLikelihood};
use crate::kernel::{self, KernelParamGradients, KernelParams};
use crate::linalg::{self, JitterConfig};
use crate::nn::{
    Architecture, CellKind, Embedding, EmbeddingParams, MeanParams, NetworkGradients, NetworkParams, ParamView,
};

pub use reference::{megp_joint_log_marginal, mtgp_joint_log_marginal, REFERENCE_SIZE_CAP};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One patient's ordered inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSeries {
    pub id: String,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl PatientSeries {
    /// Checks that lengths agree, input widths are consistent and every value is finite.
    pub fn new(id: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let s = Self::with_missing(id, inputs, targets)?;
        if s.inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!("patient `{}` has non-finite inputs", s.id)));
        }
        Ok(s)
    }

    /// Like [`PatientSeries::new`] but allows NaN inputs as missing-value markers.
    pub fn with_missing(id: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if inputs.len() != targets.len() {
            return Err(Error::InvalidSeries(format!(
                "patient `{id}` has {} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::InvalidSeries(format!("patient `{id}` has ragged inputs")));
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!("patient `{id}` has non-finite targets")));
        }
        Ok(Self { id, inputs, targets })
    }

    pub fn empty(id: impl Into<String>) -> Self {
        Self { id: id.into(), inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    /// First `len` steps.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self { id: self.id.clone(), inputs: self.inputs[..len].to_vec(), targets: self.targets[..len].to_vec() }
    }

    pub fn has_missing(&self) -> bool {
        self.inputs.iter().flatten().any(|v| v.is_nan())
    }
}

/// Which parameters are shared across patients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SharingMode {
    /// Shared mean `w` and embedding `v`, per-patient kernel `theta_i`.
    DmeGp,
    /// Zero mean, per-patient embedding `v_i` and kernel `theta_i`.
    PGps,
    /// Zero mean, shared embedding `v` and kernel `theta`.
    PGpsCov,
    /// Shared `w`, `v` and `theta`; no per-patient parameters.
    PGpsBoth,
}

impl SharingMode {
    pub const ALL: [SharingMode; 4] = [SharingMode::DmeGp, SharingMode::PGps, SharingMode::PGpsCov, SharingMode::PGpsBoth];

    pub fn label(self) -> &'static str {
        match self {
            SharingMode::DmeGp => "dme-gp",
            SharingMode::PGps => "p-gps",
            SharingMode::PGpsCov => "p-gps-cov",
            SharingMode::PGpsBoth => "p-gps-both",
        }
    }

    pub fn uses_mean(self) -> bool {
        matches!(self, SharingMode::DmeGp | SharingMode::PGpsBoth)
    }

    pub fn shares_kernel(self) -> bool {
        matches!(self, SharingMode::PGpsCov | SharingMode::PGpsBoth)
    }

    pub fn per_patient_embedding(self) -> bool {
        self == SharingMode::PGps
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SharingMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sharing mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

impl Likelihood {
    pub fn label(self) -> &'static str {
        match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Bernoulli => "bernoulli",
        }
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Likelihood::Gaussian),
            "bernoulli" => Ok(Likelihood::Bernoulli),
            _ => Err(Error::InvalidConfig(format!("unknown likelihood `{s}`"))),
        }
    }
}

/// Convenience presets over the embedding cell and mean head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanKind {
    /// Per-step MLP embedding with an MLP mean head.
    Mlp,
    /// Recurrent embedding with an MLP mean head, so `mu_t` sees `x_1..x_t`.
    Rnn,
    /// Mixture of MLP experts with a softmax gate.
    Mixture,
}

impl MeanKind {
    pub fn label(self) -> &'static str {
        match self {
            MeanKind::Mlp => "mlp",
            MeanKind::Rnn => "rnn",
            MeanKind::Mixture => "mixture",
        }
    }

    /// Sets the cell and expert count on `arch`; mixtures default to two experts.
    pub fn apply(self, arch: &mut Architecture) {
        match self {
            MeanKind::Mlp => {
                arch.cell = CellKind::Mlp;
                arch.experts = 0;
            }
            MeanKind::Rnn => {
                arch.cell = CellKind::Rnn;
                arch.experts = 0;
            }
            MeanKind::Mixture => {
                if arch.experts == 0 {
                    arch.experts = 2;
                }
            }
        }
    }
}

impl FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(MeanKind::Mlp),
            "rnn" => Ok(MeanKind::Rnn),
            "mixture" => Ok(MeanKind::Mixture),
            _ => Err(Error::InvalidConfig(format!("unknown mean kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub sharing: SharingMode,
    pub likelihood: Likelihood,
    pub jitter: JitterConfig,
}

impl ModelConfig {
    pub fn new(arch: Architecture) -> Self {
        Self { arch, sharing: SharingMode::DmeGp, likelihood: Likelihood::Gaussian, jitter: JitterConfig::default() }
    }
}

/// Parameters owned by a single patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientParams {
    pub kernel: KernelParams,
    /// Only present when embeddings are per patient.
    pub embedding: Option<EmbeddingParams>,
}

/// Gradient of one patient's log marginal with respect to everything it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGradients {
    pub kernel: KernelParamGradients,
    pub embedding: EmbeddingParams,
    pub mean: MeanParams,
}

/// Shared networks, per-patient kernels, configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DmeGpModel {
    pub config: ModelConfig,
    pub shared: NetworkParams,
    /// Single kernel used by every patient in the shared-kernel modes.
    pub shared_kernel: Option<KernelParams>,
    pub patients: BTreeMap<String, PatientParams>,
}

impl DmeGpModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shared = NetworkParams::init(&config.arch, seed)?;
        let shared_kernel = config
            .sharing
            .shares_kernel()
            .then(|| KernelParams::defaults(config.arch.embedding_dim()));
        Ok(Self { config, shared, shared_kernel, patients: BTreeMap::new() })
    }

    /// Parameters a patient starts from the first time it is seen.
    pub fn default_patient(&self) -> PatientParams {
        PatientParams {
            kernel: KernelParams::defaults(self.config.arch.embedding_dim()),
            embedding: self.config.sharing.per_patient_embedding().then(|| self.shared.embedding.clone()),
        }
    }

    /// Creates per-patient parameters from defaults when missing. No-op in
    /// modes without per-patient parameters.
    pub fn ensure_patient(&mut self, id: &str) {
        if self.config.sharing.shares_kernel() || self.patients.contains_key(id) {
            return;
        }
        let p = self.default_patient();
        self.patients.insert(id.to_string(), p);
    }

    /// Parameters in effect for patient `id`.
    pub fn resolve(&self, id: &str) -> Result<PatientParams> {
        if let Some(k) = &self.shared_kernel {
            return Ok(PatientParams { kernel: k.clone(), embedding: None });
        }
        self.patients.get(id).cloned().ok_or_else(|| Error::UnknownPatient(id.to_string()))
    }

    /// Element-wise log-space mean of all trained kernels; defaults when none exist.
    pub fn cohort_mean_kernel(&self) -> KernelParams {
        if let Some(k) = &self.shared_kernel {
            return k.clone();
        }
        KernelParams::log_mean(self.patients.values().map(|p| &p.kernel))
            .unwrap_or_else(|| KernelParams::defaults(self.config.arch.embedding_dim()))
    }

    pub(crate) fn embedding_for<'a>(&'a self, params: &'a PatientParams) -> &'a EmbeddingParams {
        params.embedding.as_ref().unwrap_or(&self.shared.embedding)
    }

    /// Mean-function values on an embedding; zeros in the zero-mean modes.
    pub(crate) fn mean_values(&self, emb: &Embedding) -> Result<Vec<f64>> {
        if self.config.sharing.uses_mean() {
            self.shared.mean.evaluate(emb)
        } else {
            Ok(vec![0.0; emb.len()])
        }
    }
}

/// Log marginal of one series under explicit patient parameters, optionally with gradients.
pub fn evaluate_patient(
    series: &PatientSeries,
    model: &DmeGpModel,
    params: &PatientParams,
    with_grads: bool,
) -> Result<(f64, Option<PatientGradients>)> {
    let embedding = model.embedding_for(params);
    let theta = &params.kernel;
    let zero_grads = || PatientGradients {
        kernel: KernelParams::zeros(theta.dim()),
        embedding: embedding.zeros_like(),
        mean: model.shared.mean.zeros_like(),
    };
    if series.is_empty() {
        return Ok((0.0, with_grads.then(zero_grads)));
    }
    let emb = embedding.embed(&series.inputs)?;
    let mu = model.mean_values(&emb)?;
    let k = kernel::kernel_matrix(&emb, theta)?;
    let t = series.len();

    let (value, d_k, d_mu) = match model.config.likelihood {
        Likelihood::Gaussian => {
            let factor = linalg::cholesky(&k, &model.config.jitter)?;
            let resid: Vec<f64> = series.targets.iter().zip(&mu).map(|(y, m)| y - m).collect();
            let alpha = linalg::chol_solve(&factor, &resid)?;
            let quad: f64 = resid.iter().zip(&alpha).map(|(r, a)| r * a).sum();
            let value = -0.5 * quad - 0.5 * linalg::log_det(&factor) - 0.5 * t as f64 * LN_2PI;
            if !with_grads {
                return Ok((value, None));
            }
            let inv = factor.inverse();
            let mut d_k = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    d_k[i * t + j] = 0.5 * (alpha[i] * alpha[j] - inv.get(i, j));
                }
            }
            (value, d_k, alpha)
        }
        Likelihood::Bernoulli => {
            let post = laplace::laplace_mode(&mu, &k, &series.targets, LatentLikelihood::Bernoulli, &model.config.jitter)?;
            if !with_grads {
                return Ok((post.log_marginal, None));
            }
            let (d_k, d_mu) = post.marginal_gradients(&k, &series.targets, LatentLikelihood::Bernoulli)?;
            (post.log_marginal, d_k, d_mu)
        }
    };

    let (kernel_grads, mut dh) = kernel::kernel_grads(&emb, theta, &d_k)?;
    let mean_grads = if model.config.sharing.uses_mean() {
        let (g, dh_mean) = model.shared.mean.backward(&emb, &d_mu)?;
        for (a, b) in dh.iter_mut().zip(&dh_mean) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        g
    } else {
        model.shared.mean.zeros_like()
    };
    let embedding_grads = embedding.backward(&emb, &dh)?;
    Ok((value, Some(PatientGradients { kernel: kernel_grads, embedding: embedding_grads, mean: mean_grads })))
}

/// `-1/2 (y - mu)^T K^-1 (y - mu) - 1/2 log|K| - T/2 log 2 pi` for a stored patient.
/// Bernoulli models return the Laplace approximation of the marginal.
pub fn patient_log_marginal(series: &PatientSeries, model: &DmeGpModel) -> Result<f64> {
    let params = model.resolve(&series.id)?;
    Ok(evaluate_patient(series, model, &params, false)?.0)
}

/// Gradients of [`patient_log_marginal`] with respect to `theta_i` and to the
/// network parameters (which are the patient's own embedding in p-gps mode).
pub fn patient_grads(series: &PatientSeries, model: &DmeGpModel) -> Result<(KernelParamGradients, NetworkGradients)> {
    let params = model.resolve(&series.id)?;
    let (_, g) = evaluate_patient(series, model, &params, true)?;
    let g = g.expect("gradients requested");
    let net = NetworkParams { arch: model.shared.arch.clone(), embedding: g.embedding, mean: g.mean };
    Ok((g.kernel, net))
}

/// Sum of per-patient log marginals.
pub fn cohort_log_marginal(cohort: &[PatientSeries], model: &DmeGpModel) -> Result<f64> {
    cohort.iter().map(|s| patient_log_marginal(s, model)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    /// Identity embedding, linear mean with the given weight and bias.
    fn scalar_model(weight: f64, bias: f64, theta: KernelParams) -> DmeGpModel {
        let mut arch = Architecture::new(1);
        arch.cell = CellKind::Identity;
        arch.mean_hidden = vec![];
        let mut m = DmeGpModel::new(ModelConfig::new(arch), 0).unwrap();
        if let MeanParams::Mlp(mlp) = &mut m.shared.mean {
            mlp.layers[0] = Dense { inputs: 1, outputs: 1, weights: vec![weight], bias: vec![bias] };
        }
        m.patients.insert("p".into(), PatientParams { kernel: theta, embedding: None });
        m
    }

    fn theta(signal: f64, noise: f64) -> KernelParams {
        KernelParams { log_lengthscales: vec![0.0], log_signal_variance: libm::log(signal), log_noise_variance: libm::log(noise) }
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = scalar_model(0.0, 0.0, theta(0.5, 0.5));
        let s = PatientSeries::new("p", vec![vec![0.3]], vec![0.0]).unwrap();
        assert!((patient_log_marginal(&s, &m).unwrap() + 0.918939).abs() < 1e-6);
        let m = scalar_model(0.0, 2.0, theta(0.5, 0.5));
        let s = PatientSeries::new("p", vec![vec![0.3]], vec![2.0]).unwrap();
        assert!((patient_log_marginal(&s, &m).unwrap() + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn independent_pair() {
        // far apart inputs give K = 2 I to machine precision
        let m = scalar_model(0.0, 0.0, theta(1.0, 1.0));
        let s = PatientSeries::new("p", vec![vec![0.0], vec![100.0]], vec![1.0, 1.0]).unwrap();
        let expect = -0.5 - 0.5 * libm::log(4.0) - LN_2PI;
        assert!((patient_log_marginal(&s, &m).unwrap() - expect).abs() < 1e-12);
        assert!((expect + 3.031024).abs() < 1e-6);
    }

    #[test]
    fn zero_residual_zero_mean_gradient() {
        let m = scalar_model(0.0, 1.5, theta(1.0, 0.2));
        let s = PatientSeries::new("p", vec![vec![0.1], vec![0.4]], vec![1.5, 1.5]).unwrap();
        let (_, net) = patient_grads(&s, &m).unwrap();
        assert!(net.mean.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_noise_gradient() {
        let (signal, noise, y, mu) = (0.7, 0.3, 1.9, 0.4);
        let m = scalar_model(0.0, mu, theta(signal, noise));
        let s = PatientSeries::new("p", vec![vec![0.0]], vec![y]).unwrap();
        let (g, _) = patient_grads(&s, &m).unwrap();
        let k = signal + noise;
        let expect = 0.5 * noise * ((y - mu) * (y - mu) / (k * k) - 1.0 / k);
        assert!((g.log_noise_variance - expect).abs() < 1e-14);
    }

    #[test]
    fn unknown_patient() {
        let m = scalar_model(0.0, 0.0, theta(1.0, 1.0));
        let s = PatientSeries::new("q", vec![vec![0.0]], vec![0.0]).unwrap();
        assert_eq!(patient_log_marginal(&s, &m), Err(Error::UnknownPatient("q".into())));
    }

    #[test]
    fn series_validation() {
        assert!(PatientSeries::new("a", vec![vec![0.0]], vec![]).is_err());
        assert!(PatientSeries::new("a", vec![vec![0.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(PatientSeries::new("a", vec![vec![f64::NAN]], vec![0.0]).is_err());
        assert!(PatientSeries::with_missing("a", vec![vec![f64::NAN]], vec![0.0]).is_ok());
        assert!(PatientSeries::new("a", vec![vec![0.0]], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn shared_modes_collapse_kernels() {
        let cfg = |sharing| ModelConfig { sharing, ..ModelConfig::new(Architecture::new(1)) };
        let mut m = DmeGpModel::new(cfg(SharingMode::PGpsCov), 1).unwrap();
        m.ensure_patient("a");
        assert!(m.patients.is_empty() && m.shared_kernel.is_some());
        let mut m = DmeGpModel::new(cfg(SharingMode::PGps), 1).unwrap();
        m.ensure_patient("a");
        assert!(m.patients["a"].embedding.is_some());
        assert_eq!("p-gps-both".parse::<SharingMode>().unwrap(), SharingMode::PGpsBoth);
        assert!("mtgp".parse::<SharingMode>().is_err());
    }
}
