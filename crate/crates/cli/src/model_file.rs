//! Model files: a TOML document holding the configuration, the flattened
//! shared network, every kernel, and the feature statistics applied to
//! inputs before they reach the model.

use std::collections::BTreeMap;
use std::path::Path;

use dmegp_core::data::{DatasetManifest, SplitAssignment, TaskKind};
use dmegp_core::nn::ParamView;
use dmegp_core::{Architecture, DmeGpModel, JitterConfig, KernelParams, ModelConfig, PatientParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

const FORMAT: &str = "dmegp-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    shared: Vec<f64>,
    config: ConfigRecord,
    normalization: NormalizationRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    shared_kernel: Option<KernelRecord>,
    patients: BTreeMap<String, PatientRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    input_dim: usize,
    cell: String,
    embed_dim: usize,
    mean_hidden: Vec<usize>,
    experts: usize,
    gate_hidden: Vec<usize>,
    activation: String,
    sharing: String,
    likelihood: String,
    jitter_ladder: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalizationRecord {
    task: String,
    means: Vec<f64>,
    stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelRecord {
    log_lengthscales: Vec<f64>,
    log_signal_variance: f64,
    log_noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientRecord {
    kernel: KernelRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

impl From<&KernelParams> for KernelRecord {
    fn from(k: &KernelParams) -> Self {
        Self {
            log_lengthscales: k.log_lengthscales.clone(),
            log_signal_variance: k.log_signal_variance,
            log_noise_variance: k.log_noise_variance,
        }
    }
}

impl KernelRecord {
    fn params(&self, dim: usize) -> Result<KernelParams> {
        if self.log_lengthscales.len() != dim {
            return Err(CliError::Data(format!("kernel has {} lengthscales, expected {dim}", self.log_lengthscales.len())));
        }
        Ok(KernelParams {
            log_lengthscales: self.log_lengthscales.clone(),
            log_signal_variance: self.log_signal_variance,
            log_noise_variance: self.log_noise_variance,
        })
    }
}

fn parse<T: std::str::FromStr<Err = dmegp_core::Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: dmegp_core::Error| CliError::Data(format!("model file: {e}")))
}

/// Feature statistics without a split assignment; identity when the
/// training data was not standardized.
pub fn identity_normalization(feature_count: usize, task: TaskKind) -> DatasetManifest {
    DatasetManifest {
        feature_count,
        means: vec![0.0; feature_count],
        stds: vec![1.0; feature_count],
        task,
        assignment: SplitAssignment::new(),
    }
}

pub fn model_to_string(model: &DmeGpModel, normalization: &DatasetManifest) -> Result<String> {
    let a = &model.config.arch;
    let file = ModelFile {
        format: FORMAT.into(),
        version: VERSION,
        shared: model.shared.to_flat(),
        config: ConfigRecord {
            input_dim: a.input_dim,
            cell: a.cell.label().into(),
            embed_dim: a.embed_dim,
            mean_hidden: a.mean_hidden.clone(),
            experts: a.experts,
            gate_hidden: a.gate_hidden.clone(),
            activation: a.activation.label().into(),
            sharing: model.config.sharing.label().into(),
            likelihood: model.config.likelihood.label().into(),
            jitter_ladder: model.config.jitter.ladder.clone(),
        },
        normalization: NormalizationRecord {
            task: normalization.task.label().into(),
            means: normalization.means.clone(),
            stds: normalization.stds.clone(),
        },
        shared_kernel: model.shared_kernel.as_ref().map(KernelRecord::from),
        patients: model
            .patients
            .iter()
            .map(|(id, p)| {
                let rec = PatientRecord { kernel: (&p.kernel).into(), embedding: p.embedding.as_ref().map(|e| e.to_flat()) };
                (id.clone(), rec)
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| CliError::Data(e.to_string()))
}

pub fn model_from_str(text: &str) -> Result<(DmeGpModel, DatasetManifest)> {
    let file: ModelFile = toml::from_str(text).map_err(|e| CliError::Data(format!("model file: {e}")))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(CliError::Data(format!("unsupported model format `{}` version {}", file.format, file.version)));
    }
    let c = &file.config;
    let arch = Architecture {
        input_dim: c.input_dim,
        cell: parse(&c.cell)?,
        embed_dim: c.embed_dim,
        mean_hidden: c.mean_hidden.clone(),
        experts: c.experts,
        gate_hidden: c.gate_hidden.clone(),
        activation: parse(&c.activation)?,
    };
    let config = ModelConfig {
        arch,
        sharing: parse(&c.sharing)?,
        likelihood: parse(&c.likelihood)?,
        jitter: JitterConfig { ladder: c.jitter_ladder.clone() },
    };
    let dim = config.arch.embedding_dim();
    let mut model = DmeGpModel::new(config, 0)?;
    model.shared.set_flat(&file.shared).map_err(|e| CliError::Data(format!("model file: shared parameters: {e}")))?;
    match (&mut model.shared_kernel, &file.shared_kernel) {
        (Some(k), Some(rec)) => *k = rec.params(dim)?,
        (None, None) => {}
        _ => return Err(CliError::Data("model file: shared kernel does not match the sharing mode".into())),
    }
    for (id, rec) in &file.patients {
        let mut p: PatientParams = model.default_patient();
        p.kernel = rec.kernel.params(dim)?;
        match (&mut p.embedding, &rec.embedding) {
            (Some(e), Some(flat)) => e.set_flat(flat).map_err(|e| CliError::Data(format!("model file: patient `{id}`: {e}")))?,
            (None, None) => {}
            _ => return Err(CliError::Data(format!("model file: patient `{id}` embedding does not match the sharing mode"))),
        }
        model.patients.insert(id.clone(), p);
    }
    let n = &file.normalization;
    if n.means.len() != c.input_dim || n.stds.len() != c.input_dim {
        return Err(CliError::Data("model file: normalization statistics do not match the input dimension".into()));
    }
    let normalization = DatasetManifest {
        feature_count: c.input_dim,
        means: n.means.clone(),
        stds: n.stds.clone(),
        task: parse(&n.task)?,
        assignment: SplitAssignment::new(),
    };
    Ok((model, normalization))
}

pub fn save_model(path: &Path, model: &DmeGpModel, normalization: &DatasetManifest) -> Result<()> {
    write_atomic(path, model_to_string(model, normalization)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<(DmeGpModel, DatasetManifest)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    model_from_str(&text)
}
