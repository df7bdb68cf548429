//! Run configuration read from a single TOML file. Every field has a default,
//! so an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dmegp_core::data::{ClassificationSpec, SyntheticSpec, TaskKind, VitalSignSpec};
use dmegp_core::nn::Activation;
use dmegp_core::{
    AdamConfig, AdaptationConfig, Architecture, JitterConfig, Likelihood, MeanKind, ModelConfig, SharingMode, ThetaInit,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialization, shuffling, splits and the synthetic generators.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub data: DataSection,
    pub eval: EvalSection,
    /// Filled in by the tool when it writes a run manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            train: TrainSection::default(),
            adapt: AdaptSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            invocation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mlp`, `rnn` or `mixture`.
    pub mean_kind: String,
    /// Overrides the embedding cell chosen by `mean_kind`: `identity`, `mlp` or `rnn`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<String>,
    /// `dme-gp`, `p-gps`, `p-gps-cov` or `p-gps-both`.
    pub sharing: String,
    /// `gaussian` or `bernoulli`.
    pub likelihood: String,
    pub embed_dim: usize,
    pub mean_hidden: Vec<usize>,
    /// Expert count, used by `mixture` only.
    pub experts: usize,
    pub gate_hidden: Vec<usize>,
    /// `tanh` or `sigmoid`.
    pub activation: String,
    pub jitter_ladder: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mean_kind: "mlp".into(),
            cell: None,
            sharing: "dme-gp".into(),
            likelihood: "gaussian".into(),
            embed_dim: 8,
            mean_hidden: vec![8],
            experts: 2,
            gate_hidden: Vec::new(),
            activation: "tanh".into(),
            jitter_ladder: JitterConfig::default().ladder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub l2: f64,
    pub theta_inner_steps: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub theta_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            l2: t.l2,
            theta_inner_steps: t.theta_inner_steps,
            validation_fraction: t.validation_fraction,
            learning_rate: t.shared_optimizer.learning_rate,
            theta_learning_rate: t.theta_optimizer.learning_rate,
            beta1: t.shared_optimizer.beta1,
            beta2: t.shared_optimizer.beta2,
            epsilon: t.shared_optimizer.epsilon,
            dropout: t.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// `cohort-mean` or `kernel-defaults`.
    pub init: String,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        Self { steps: a.steps, learning_rate: a.optimizer.learning_rate, init: a.init.label().into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `motivating`, `classification`, `vital-signs` or `csv`.
    pub source: String,
    /// Input file when `source = "csv"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// `regression` or `classification`.
    pub task: String,
    /// Train, validation and test fractions for patient-level splits.
    pub split: [f64; 3],
    /// Standardize features with training-split statistics.
    pub normalize: bool,
    /// Replace each series by its sliding windows.
    pub window: bool,
    pub lag: usize,
    pub horizon: usize,
    pub motivating: MotivatingSection,
    pub classification: ClassificationSection,
    pub vital_signs: VitalSignSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "motivating".into(),
            path: None,
            task: "regression".into(),
            split: [0.7, 0.1, 0.2],
            normalize: false,
            window: false,
            lag: dmegp_core::data::DEFAULT_LAG,
            horizon: dmegp_core::data::DEFAULT_HORIZON,
            motivating: MotivatingSection::default(),
            classification: ClassificationSection::default(),
            vital_signs: VitalSignSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotivatingSection {
    pub train_patients: usize,
    pub test_patients: usize,
    pub steps: usize,
    pub train_range: [f64; 2],
    pub extrapolation_range: [f64; 2],
    pub extrapolation_steps: usize,
    pub offset_mean: f64,
    pub offset_spread: f64,
    pub sigma: f64,
}

impl Default for MotivatingSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            train_patients: s.train_patients,
            test_patients: s.test_patients,
            steps: s.steps,
            train_range: [s.train_range.0, s.train_range.1],
            extrapolation_range: [s.extrapolation_range.0, s.extrapolation_range.1],
            extrapolation_steps: s.extrapolation_steps,
            offset_mean: s.offset_mean,
            offset_spread: s.offset_spread,
            sigma: s.sigma,
        }
    }
}

impl MotivatingSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train_patients: self.train_patients,
            test_patients: self.test_patients,
            steps: self.steps,
            train_range: (self.train_range[0], self.train_range[1]),
            extrapolation_range: (self.extrapolation_range[0], self.extrapolation_range[1]),
            extrapolation_steps: self.extrapolation_steps,
            offset_mean: self.offset_mean,
            offset_spread: self.offset_spread,
            sigma: self.sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationSection {
    pub patients: usize,
    pub steps: usize,
    pub input_dim: usize,
    pub latent_variance: f64,
    pub latent_lengthscale: f64,
}

impl Default for ClassificationSection {
    fn default() -> Self {
        let s = ClassificationSpec::default();
        Self {
            patients: s.patients,
            steps: s.steps,
            input_dim: s.input_dim,
            latent_variance: s.latent_variance,
            latent_lengthscale: s.latent_lengthscale,
        }
    }
}

impl ClassificationSection {
    pub fn spec(&self, seed: u64) -> ClassificationSpec {
        ClassificationSpec {
            patients: self.patients,
            steps: self.steps,
            input_dim: self.input_dim,
            latent_variance: self.latent_variance,
            latent_lengthscale: self.latent_lengthscale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitalSignSection {
    pub patients: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub time_scale: f64,
    pub value_scale: f64,
}

impl Default for VitalSignSection {
    fn default() -> Self {
        let s = VitalSignSpec::default();
        Self {
            patients: s.patients,
            min_steps: s.min_steps,
            max_steps: s.max_steps,
            time_scale: s.time_scale,
            value_scale: s.value_scale,
        }
    }
}

impl VitalSignSection {
    pub fn spec(&self, seed: u64) -> VitalSignSpec {
        VitalSignSpec {
            patients: self.patients,
            min_steps: self.min_steps,
            max_steps: self.max_steps,
            time_scale: self.time_scale,
            value_scale: self.value_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Steps of each test series used as the adaptation history. When unset,
    /// the motivating cohort uses its training-range steps and other sources
    /// use `history_fraction` of each series.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_steps: Option<usize>,
    pub history_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { history_steps: None, history_fraction: 0.5 }
    }
}

/// The command and arguments that produced a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub command: String,
    pub version: String,
    pub args: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr<Err = dmegp_core::Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: dmegp_core::Error| CliError::Config(e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parses every enumerated field and checks the derived core configurations.
    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?;
        self.train_config()?.validate()?;
        self.task()?;
        match self.data.source.as_str() {
            "motivating" => self.data.motivating.spec(self.seed).validate()?,
            "classification" | "vital-signs" => {}
            "csv" if self.data.path.is_some() => {}
            "csv" => return Err(CliError::Config("data.path is required for the csv source".into())),
            other => return Err(CliError::Config(format!("unknown data source `{other}`"))),
        }
        if !(0.0..=1.0).contains(&self.eval.history_fraction) {
            return Err(CliError::Config("eval.history_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<TaskKind> {
        parse(&self.data.task)
    }

    pub fn sharing(&self) -> Result<SharingMode> {
        parse(&self.model.sharing)
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut arch = Architecture::new(input_dim);
        arch.embed_dim = m.embed_dim;
        arch.mean_hidden = m.mean_hidden.clone();
        arch.gate_hidden = m.gate_hidden.clone();
        arch.activation = parse::<Activation>(&m.activation)?;
        let kind: MeanKind = parse(&m.mean_kind)?;
        if kind == MeanKind::Mixture {
            arch.experts = m.experts.max(1);
        }
        kind.apply(&mut arch);
        if let Some(cell) = &m.cell {
            arch.cell = parse(cell)?;
        }
        arch.validate()?;
        if m.jitter_ladder.is_empty() || m.jitter_ladder.iter().any(|j| j.is_nan() || *j < 0.0) {
            return Err(CliError::Config("model.jitter_ladder must be non-empty and non-negative".into()));
        }
        Ok(ModelConfig {
            arch,
            sharing: parse(&m.sharing)?,
            likelihood: parse::<Likelihood>(&m.likelihood)?,
            jitter: JitterConfig { ladder: m.jitter_ladder.clone() },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let adam = |lr| AdamConfig { learning_rate: lr, beta1: t.beta1, beta2: t.beta2, epsilon: t.epsilon };
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            l2: t.l2,
            seed: self.seed,
            theta_inner_steps: t.theta_inner_steps,
            shared_optimizer: adam(t.learning_rate),
            theta_optimizer: adam(t.theta_learning_rate),
            validation_fraction: t.validation_fraction,
            validation_adaptation: self.adaptation_config()?,
            dropout: t.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adaptation_config(&self) -> Result<AdaptationConfig> {
        Ok(AdaptationConfig {
            steps: self.adapt.steps,
            optimizer: AdamConfig { learning_rate: self.adapt.learning_rate, ..AdamConfig::default() },
            init: parse::<ThetaInit>(&self.adapt.init)?,
        })
    }
}
