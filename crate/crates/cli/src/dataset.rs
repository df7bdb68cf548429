//! Resolves the configured data source into train, validation and test cohorts.

use dmegp_core::data::{self, DatasetManifest, Split, SplitAssignment, TaskKind};
use dmegp_core::PatientSeries;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io;
use crate::model_file::identity_normalization;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PatientSeries>,
    /// Empty when training should carve its own validation patients.
    pub validation: Vec<PatientSeries>,
    pub test: Vec<PatientSeries>,
    /// Statistics applied to every split, plus the split assignment.
    pub manifest: DatasetManifest,
    /// Adaptation history length fixed by the source, if any.
    pub history_steps: Option<usize>,
}

impl Dataset {
    pub fn input_dim(&self) -> Result<usize> {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .find_map(PatientSeries::input_dim)
            .ok_or_else(|| CliError::Data("dataset contains no observations".into()))
    }
}

fn partition(all: Vec<PatientSeries>, assignment: &SplitAssignment) -> [Vec<PatientSeries>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for s in all {
        let k = match assignment.get(&s.id) {
            Some(Split::Validation) => 1,
            Some(Split::Test) => 2,
            _ => 0,
        };
        out[k].push(s);
    }
    out
}

/// The cohort before any feature standardization.
pub fn resolve_raw(cfg: &RunConfig) -> Result<Dataset> {
    let task = cfg.task()?;
    let d = &cfg.data;
    if d.source == "motivating" {
        let cohort = data::generate_motivating(&d.motivating.spec(cfg.seed))?;
        let mut assignment = SplitAssignment::new();
        assignment.extend(cohort.train.iter().map(|s| (s.id.clone(), Split::Train)));
        assignment.extend(cohort.test.iter().map(|s| (s.id.clone(), Split::Test)));
        let manifest = DatasetManifest { assignment, ..identity_normalization(1, task) };
        return Ok(Dataset {
            train: cohort.train,
            validation: Vec::new(),
            test: cohort.test,
            manifest,
            history_steps: Some(cohort.history_steps),
        });
    }
    let mut all = match d.source.as_str() {
        "classification" => data::generate_classification(&d.classification.spec(cfg.seed))?,
        "vital-signs" => data::generate_vital_signs(&d.vital_signs.spec(cfg.seed))?,
        "csv" => io::load_csv(d.path.as_deref().ok_or_else(|| CliError::Config("data.path is required".into()))?)?,
        other => return Err(CliError::Config(format!("unknown data source `{other}`"))),
    };
    if d.window {
        all = all.iter().map(|s| data::make_windows(s, d.lag, d.horizon)).collect::<dmegp_core::Result<_>>()?;
    }
    let dim = all
        .iter()
        .find_map(PatientSeries::input_dim)
        .ok_or_else(|| CliError::Data("dataset contains no observations".into()))?;
    let assignment = data::split_by_patient(&all, d.split, cfg.seed)?;
    let manifest = DatasetManifest { assignment: assignment.clone(), ..identity_normalization(dim, task) };
    let [train, validation, test] = partition(all, &assignment);
    if train.is_empty() {
        return Err(CliError::Data("the training split is empty".into()));
    }
    Ok(Dataset { train, validation, test, manifest, history_steps: None })
}

/// The cohort as the model sees it: standardized with training-split
/// statistics when `data.normalize` is set, missing inputs imputed either way.
pub fn resolve(cfg: &RunConfig) -> Result<Dataset> {
    let raw = resolve_raw(cfg)?;
    if !cfg.data.normalize {
        // the raw manifest carries identity statistics
        let m = &raw.manifest;
        return Ok(Dataset {
            train: data::standardize(&raw.train, m)?,
            validation: data::standardize(&raw.validation, m)?,
            test: data::standardize(&raw.test, m)?,
            ..raw
        });
    }
    let all: Vec<PatientSeries> = raw.train.iter().chain(&raw.validation).chain(&raw.test).cloned().collect();
    let (normalized, manifest) = data::normalize(&all, &raw.manifest.assignment, raw.manifest.task)?;
    let [train, validation, test] = partition(normalized, &manifest.assignment);
    Ok(Dataset { train, validation, test, manifest, history_steps: raw.history_steps })
}

/// Adaptation history length for a test series of length `len`.
pub fn history_len(cfg: &RunConfig, source_steps: Option<usize>, len: usize) -> usize {
    let h = cfg
        .eval
        .history_steps
        .or(source_steps)
        .unwrap_or_else(|| (cfg.eval.history_fraction * len as f64).floor() as usize);
    h.min(len)
}

pub fn check_task(task: TaskKind, likelihood: dmegp_core::Likelihood) -> Result<()> {
    let ok = matches!(
        (task, likelihood),
        (TaskKind::Regression, dmegp_core::Likelihood::Gaussian) | (TaskKind::Classification, dmegp_core::Likelihood::Bernoulli)
    );
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("task `{}` does not match likelihood `{}`", task.label(), likelihood.label())))
    }
}
