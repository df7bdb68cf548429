//! Synthetic cohorts, windowing, normalization and patient-level splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams};
use crate::linalg::{self, JitterConfig};
use crate::model::PatientSeries;

/// Target of the motivating experiment, `x + sin(x) + eps`.
pub fn motivating_target(x: f64, eps: f64) -> f64 {
    x + libm::sin(x) + eps
}

/// Settings for the heterogeneous `x + sin(x) + eps_i` cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train_patients: usize,
    pub test_patients: usize,
    /// Steps per patient inside the training range.
    pub steps: usize,
    pub train_range: (f64, f64),
    /// Half-open on the left: `(lo, hi]`.
    pub extrapolation_range: (f64, f64),
    pub extrapolation_steps: usize,
    /// Patient offsets `mu_i ~ N(offset_mean, offset_spread^2)`.
    pub offset_mean: f64,
    pub offset_spread: f64,
    /// Per-step deviation `eps_t ~ N(mu_i, sigma^2)`.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_patients: 40,
            test_patients: 4,
            steps: 30,
            train_range: (0.0, 6.0),
            extrapolation_range: (6.0, 10.0),
            extrapolation_steps: 20,
            offset_mean: 0.0,
            offset_spread: 2.0,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.train_patients == 0 || self.steps == 0 {
            return bad("patient and step counts must be positive");
        }
        if !(self.sigma >= 0.0) || !(self.offset_spread >= 0.0) {
            return bad("spreads must be non-negative");
        }
        let (a, b) = self.train_range;
        let (c, d) = self.extrapolation_range;
        if !(a <= b && b <= c && c < d) {
            return bad("training range must precede the extrapolation range");
        }
        Ok(())
    }

    fn training_inputs(&self) -> Vec<f64> {
        let (a, b) = self.train_range;
        if self.steps == 1 {
            return vec![a];
        }
        (0..self.steps).map(|t| a + (b - a) * t as f64 / (self.steps - 1) as f64).collect()
    }

    fn extrapolation_inputs(&self) -> Vec<f64> {
        let (c, d) = self.extrapolation_range;
        let n = self.extrapolation_steps;
        (1..=n).map(|k| c + (d - c) * k as f64 / n as f64).collect()
    }
}

/// Training patients cover the training range only; test patients continue
/// into the extrapolation range after `history_steps` training-range steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MotivatingCohort {
    pub train: Vec<PatientSeries>,
    pub test: Vec<PatientSeries>,
    pub history_steps: usize,
    /// `mu_i` per patient, train then test.
    pub offsets: Vec<f64>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite non-negative standard deviation")
}

fn motivating_patient(id: String, xs: &[f64], spec: &SyntheticSpec, seed: u64) -> (PatientSeries, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = normal(spec.offset_mean, spec.offset_spread).sample(&mut rng);
    let eps = normal(mu, spec.sigma);
    let targets = xs.iter().map(|x| motivating_target(*x, eps.sample(&mut rng))).collect();
    let inputs = xs.iter().map(|x| vec![*x]).collect();
    (PatientSeries { id, inputs, targets }, mu)
}

pub fn generate_motivating(spec: &SyntheticSpec) -> Result<MotivatingCohort> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_x = spec.training_inputs();
    let mut test_x = train_x.clone();
    test_x.extend(spec.extrapolation_inputs());
    let mut offsets = Vec::new();
    let mut train = Vec::new();
    for i in 0..spec.train_patients {
        let (s, mu) = motivating_patient(format!("train-{i:03}"), &train_x, spec, master.next_u64());
        train.push(s);
        offsets.push(mu);
    }
    let mut test = Vec::new();
    for i in 0..spec.test_patients {
        let (s, mu) = motivating_patient(format!("test-{i:03}"), &test_x, spec, master.next_u64());
        test.push(s);
        offsets.push(mu);
    }
    Ok(MotivatingCohort { train, test, history_steps: spec.steps, offsets })
}

/// Binary cohort drawn from a latent mixed-effect process: a shared trend plus
/// a per-patient GP draw, squashed through a sigmoid and sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSpec {
    pub patients: usize,
    pub steps: usize,
    pub input_dim: usize,
    /// Signal variance and lengthscale (in steps) of the per-patient latent GP.
    pub latent_variance: f64,
    pub latent_lengthscale: f64,
    pub seed: u64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self { patients: 40, steps: 12, input_dim: 2, latent_variance: 1.0, latent_lengthscale: 3.0, seed: 0 }
    }
}

/// Shared latent trend of the classification generator.
pub fn classification_trend(x: &[f64]) -> f64 {
    let a = x.first().copied().unwrap_or(0.0);
    let b = x.get(1).copied().unwrap_or(0.0);
    2.0 * libm::sin(2.0 * a) + b
}

pub fn generate_classification(spec: &ClassificationSpec) -> Result<Vec<PatientSeries>> {
    if spec.patients == 0 || spec.steps == 0 || spec.input_dim == 0 {
        return Err(Error::InvalidConfig("patient, step and input counts must be positive".into()));
    }
    if !(spec.latent_variance > 0.0) || !(spec.latent_lengthscale > 0.0) {
        return Err(Error::InvalidConfig("latent GP settings must be positive".into()));
    }
    let theta = KernelParams {
        log_lengthscales: vec![libm::log(spec.latent_lengthscale)],
        log_signal_variance: libm::log(spec.latent_variance),
        log_noise_variance: libm::log(1e-6 * spec.latent_variance),
    };
    let times: Vec<Vec<f64>> = (0..spec.steps).map(|t| vec![t as f64]).collect();
    let k = kernel::noisy_matrix(&times, &theta)?;
    let chol = linalg::cholesky(&k, &JitterConfig::default())?;
    let std = normal(0.0, 1.0);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let mut x = vec![0.0; spec.input_dim];
        let mut inputs = Vec::with_capacity(spec.steps);
        for _ in 0..spec.steps {
            // slowly drifting covariates
            for v in &mut x {
                *v = (0.7 * *v + 0.6 * std.sample(&mut rng)).clamp(-3.0, 3.0);
            }
            inputs.push(x.clone());
        }
        let z: Vec<f64> = (0..spec.steps).map(|_| std.sample(&mut rng)).collect();
        let targets = (0..spec.steps)
            .map(|t| {
                let l: f64 = (0..=t).map(|j| chol.get(t, j) * z[j]).sum();
                let p = crate::infer::laplace::logistic(classification_trend(&inputs[t]) + l);
                if rng.random::<f64>() < p { 1.0 } else { 0.0 }
            })
            .collect();
        out.push(PatientSeries { id: format!("patient-{i:03}"), inputs, targets });
    }
    Ok(out)
}

/// Heart-rate-like series with irregular event times.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalSignSpec {
    pub patients: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Raw event times and values are divided by these.
    pub time_scale: f64,
    pub value_scale: f64,
    pub seed: u64,
}

impl VitalSignSpec {
    /// Scaling preset of the heart-rate benchmark: time / 5000, value / 50.
    pub const TIME_SCALE: f64 = 5000.0;
    pub const VALUE_SCALE: f64 = 50.0;
}

impl Default for VitalSignSpec {
    fn default() -> Self {
        Self {
            patients: 40,
            min_steps: 20,
            max_steps: 40,
            time_scale: Self::TIME_SCALE,
            value_scale: Self::VALUE_SCALE,
            seed: 0,
        }
    }
}

pub fn generate_vital_signs(spec: &VitalSignSpec) -> Result<Vec<PatientSeries>> {
    if spec.patients == 0 || spec.min_steps == 0 || spec.min_steps > spec.max_steps {
        return Err(Error::InvalidConfig("invalid vital-sign patient or step counts".into()));
    }
    if !(spec.time_scale > 0.0) || !(spec.value_scale > 0.0) {
        return Err(Error::InvalidConfig("scales must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let steps = rng.random_range(spec.min_steps..=spec.max_steps);
        let baseline = normal(85.0, 10.0).sample(&mut rng);
        let drift = normal(0.0, 2.0).sample(&mut rng);
        let shock = normal(0.0, 3.0);
        let mut minutes = 0.0;
        let mut ar = 0.0;
        let mut inputs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        for _ in 0..steps {
            minutes += rng.random_range(30.0..90.0);
            ar = 0.8 * ar + shock.sample(&mut rng);
            let day = minutes / 1440.0;
            let hr = baseline + drift * day + 6.0 * libm::sin(2.0 * core::f64::consts::PI * day) + ar;
            inputs.push(vec![minutes / spec.time_scale]);
            targets.push(hr / spec.value_scale);
        }
        out.push(PatientSeries { id: format!("hr-{i:03}"), inputs, targets });
    }
    Ok(out)
}

/// Sliding windows: step `t` maps the last `lag + 1` inputs and targets up to
/// `t` to the target at `t + horizon`.
pub fn make_windows(series: &PatientSeries, lag: usize, horizon: usize) -> Result<PatientSeries> {
    let needed = lag + horizon + 1;
    if series.len() < needed {
        return Err(Error::SeriesTooShort { len: series.len(), needed });
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in lag..series.len() - horizon {
        let mut v: Vec<f64> = series.inputs[t - lag..=t].iter().flatten().copied().collect();
        v.extend_from_slice(&series.targets[t - lag..=t]);
        inputs.push(v);
        targets.push(series.targets[t + horizon]);
    }
    Ok(PatientSeries { id: series.id.clone(), inputs, targets })
}

pub const DEFAULT_LAG: usize = 2;
pub const DEFAULT_HORIZON: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split `{s}`"))),
        }
    }
}

pub type SplitAssignment = BTreeMap<String, Split>;

/// Shuffles sorted patient ids under `seed` and assigns contiguous blocks of
/// rounded sizes to train, validation and test.
pub fn split_by_patient(cohort: &[PatientSeries], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || libm::fabs(fractions.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(Error::InvalidConfig("split fractions must be non-negative and sum to 1".into()));
    }
    let mut ids: Vec<&str> = cohort.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSeries("duplicate patient ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = (libm::round(fractions[0] * n as f64) as usize).min(n);
    let n_val = (libm::round(fractions[1] * n as f64) as usize).min(n - n_train);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            (String::from(id), s)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

impl core::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            _ => Err(Error::InvalidConfig(format!("unknown task `{s}`"))),
        }
    }
}

/// Feature statistics and split assignment of a prepared dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub feature_count: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub task: TaskKind,
    pub assignment: SplitAssignment,
}

/// Standardizes every input feature with statistics from the training split
/// (every patient when `assignment` is empty). Missing values (NaN) become 0
/// and constant features get standard deviation 1.
pub fn normalize(
    cohort: &[PatientSeries],
    assignment: &SplitAssignment,
    task: TaskKind,
) -> Result<(Vec<PatientSeries>, DatasetManifest)> {
    let d = cohort.iter().find_map(PatientSeries::input_dim).ok_or(Error::EmptyCohort)?;
    let in_train = |s: &PatientSeries| assignment.is_empty() || assignment.get(&s.id) == Some(&Split::Train);
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    for s in cohort.iter().filter(|s| in_train(s)) {
        for x in &s.inputs {
            check_width(&s.id, x, d)?;
            for (j, v) in x.iter().enumerate().filter(|(_, v)| !v.is_nan()) {
                sum[j] += v;
                count[j] += 1;
            }
        }
    }
    let means: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 }).collect();
    let mut sq = vec![0.0; d];
    for s in cohort.iter().filter(|s| in_train(s)) {
        for x in &s.inputs {
            for (j, v) in x.iter().enumerate().filter(|(_, v)| !v.is_nan()) {
                sq[j] += (v - means[j]) * (v - means[j]);
            }
        }
    }
    let stds: Vec<f64> = sq
        .iter()
        .zip(&count)
        .map(|(q, c)| {
            let sd = if *c == 0 { 0.0 } else { libm::sqrt(q / *c as f64) };
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    let manifest = DatasetManifest { feature_count: d, means, stds, task, assignment: assignment.clone() };
    Ok((standardize(cohort, &manifest)?, manifest))
}

/// Applies stored statistics: `(x - mean) / std`, missing values to 0.
pub fn standardize(cohort: &[PatientSeries], manifest: &DatasetManifest) -> Result<Vec<PatientSeries>> {
    let d = manifest.feature_count;
    let mut out = Vec::with_capacity(cohort.len());
    for s in cohort {
        let mut inputs = Vec::with_capacity(s.len());
        for x in &s.inputs {
            check_width(&s.id, x, d)?;
            inputs.push(
                x.iter()
                    .enumerate()
                    .map(|(j, v)| if v.is_nan() { 0.0 } else { (v - manifest.means[j]) / manifest.stds[j] })
                    .collect(),
            );
        }
        out.push(PatientSeries { id: s.id.clone(), inputs, targets: s.targets.clone() });
    }
    Ok(out)
}

fn check_width(id: &str, x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::InvalidSeries(format!("patient `{id}` has {} features, expected {d}", x.len())));
    }
    Ok(())
}

/// Inverse of [`normalize`] on the inputs.
pub fn denormalize(cohort: &[PatientSeries], manifest: &DatasetManifest) -> Vec<PatientSeries> {
    cohort
        .iter()
        .map(|s| PatientSeries {
            id: s.id.clone(),
            inputs: s
                .inputs
                .iter()
                .map(|x| x.iter().enumerate().map(|(j, v)| v * manifest.stds[j] + manifest.means[j]).collect())
                .collect(),
            targets: s.targets.clone(),
        })
        .collect()
}
