//! The subcommands. Each writes its outputs atomically into a directory
//! together with a run manifest recording the effective configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dmegp_core::data::{self, DatasetManifest, TaskKind};
use dmegp_core::infer::{adapt_new_patient, forecast_after, sequential_forecast};
use dmegp_core::train::{fit, BatchMap, FitOutput};
use dmegp_core::{metrics, DmeGpModel, Likelihood, PatientSeries, SharingMode};

use crate::config::{Invocation, RunConfig};
use crate::dataset::{self, check_task, history_len, Dataset};
use crate::error::{CliError, Result};
use crate::io::{self, fmt, save_table, write_atomic};
use crate::manifest::save_manifest;
use crate::model_file::{load_model, save_model};

pub const MODEL_FILE: &str = "model.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const DATASET_MANIFEST_FILE: &str = "dataset_manifest.toml";

/// Name of the run manifest written by `command`.
pub fn run_manifest_name(command: &str) -> String {
    format!("run_manifest_{command}.toml")
}

/// Records the configuration, with every default filled in, and the
/// command-specific arguments.
pub fn write_run_manifest(cfg: &RunConfig, dir: &Path, command: &str, args: BTreeMap<String, String>) -> Result<PathBuf> {
    let mut full = cfg.clone();
    full.invocation = Some(Invocation { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), args });
    let path = dir.join(run_manifest_name(command));
    write_atomic(&path, full.to_toml()?.as_bytes())?;
    Ok(path)
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model_path: PathBuf,
    pub fit: FitOutput,
}

fn fit_dataset<E: BatchMap>(cfg: &RunConfig, ds: &Dataset, exec: &E) -> Result<FitOutput> {
    let model_cfg = cfg.model_config(ds.input_dim()?)?;
    check_task(ds.manifest.task, model_cfg.likelihood)?;
    let train_cfg = cfg.train_config()?;
    let validation = (!ds.validation.is_empty()).then_some(ds.validation.as_slice());
    Ok(fit(&ds.train, validation, &train_cfg, &model_cfg, exec)?)
}

fn normalization_only(m: &DatasetManifest) -> DatasetManifest {
    DatasetManifest { assignment: Default::default(), ..m.clone() }
}

/// `train`: fits a model and writes it with its per-epoch history.
pub fn train<E: BatchMap>(cfg: &RunConfig, exec: &E) -> Result<TrainReport> {
    let ds = dataset::resolve(cfg)?;
    let out = fit_dataset(cfg, &ds, exec)?;
    let dir = &cfg.output_dir;
    let model_path = dir.join(MODEL_FILE);
    save_model(&model_path, &out.model, &normalization_only(&ds.manifest))?;
    let header: Vec<String> = ["epoch", "train_log_likelihood", "validation_metric", "skipped"].map(String::from).into();
    let mut rows = vec![vec!["0".into(), String::new(), fmt(out.initial_validation), "0".into()]];
    rows.extend(out.history.iter().map(|l| {
        vec![l.epoch.to_string(), fmt(l.train_log_likelihood), fmt(l.validation_metric), l.skipped.to_string()]
    }));
    save_table(&dir.join(HISTORY_FILE), &header, &rows)?;
    save_manifest(&dir.join(DATASET_MANIFEST_FILE), &ds.manifest)?;
    write_run_manifest(cfg, dir, "train", BTreeMap::new())?;
    log::info!("best epoch {} of {}; model written to {}", out.best_epoch, out.history.len(), model_path.display());
    Ok(TrainReport { model_path, fit: out })
}

fn check_dim(model: &DmeGpModel, cohort: &[PatientSeries], what: &str) -> Result<()> {
    let d = model.config.arch.input_dim;
    match cohort.iter().find_map(PatientSeries::input_dim) {
        Some(k) if k != d => Err(CliError::Data(format!("{what} has {k} features but the model expects {d}"))),
        _ => Ok(()),
    }
}

/// `predict`: adapts to each query patient's history and predicts every query row.
pub fn predict(cfg: &RunConfig, model_path: &Path, history: &Path, queries: &Path, out: &Path) -> Result<()> {
    let (model, norm) = load_model(model_path)?;
    let adapt = cfg.adaptation_config()?;
    let hist_raw = io::load_csv(history)?;
    check_dim(&model, &hist_raw, "history")?;
    let hist = data::standardize(&hist_raw, &norm)?;
    let timed = io::load_query_csv(queries)?;
    let raw_queries: Vec<PatientSeries> = timed.iter().map(|t| t.series.clone()).collect();
    check_dim(&model, &raw_queries, "queries")?;
    let qs = data::standardize(&raw_queries, &norm)?;

    let classification = model.config.likelihood == Likelihood::Bernoulli;
    let mut rows = Vec::new();
    for (q, t) in qs.iter().zip(&timed) {
        let h = hist.iter().find(|s| s.id == q.id).cloned().unwrap_or_else(|| PatientSeries::empty(q.id.clone()));
        let adapted = adapt_new_patient(&h, &model, &adapt)?;
        if adapted.warning {
            log::warn!("adaptation for patient `{}` stopped early on a numerical failure", q.id);
        }
        for (d, time) in forecast_after(&h, &q.inputs, &adapted.params, &model)?.iter().zip(&t.time_index) {
            let mut row = vec![q.id.clone(), time.to_string(), fmt(d.mean), fmt(d.std_dev())];
            if classification {
                row.push(fmt(d.class_probability.unwrap_or(d.mean)));
            }
            row.push(fmt(d.trend));
            row.push(u8::from(d.warning).to_string());
            rows.push(row);
        }
    }
    let mut header: Vec<String> = ["patient_id", "time_index", "mean", "std"].map(String::from).into();
    if classification {
        header.push("class_probability".into());
    }
    header.extend(["trend", "warning"].map(String::from));
    save_table(out, &header, &rows)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let args = BTreeMap::from([
        ("model".to_string(), path_arg(model_path)),
        ("history".to_string(), path_arg(history)),
        ("queries".to_string(), path_arg(queries)),
        ("out".to_string(), path_arg(out)),
    ]);
    write_run_manifest(cfg, dir, "predict", args)?;
    Ok(())
}

/// Scores for one test patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientScore {
    pub id: String,
    pub history: usize,
    /// One-step-ahead predictions on the steps after the history.
    pub sequential: Vec<f64>,
    /// Predictions conditioned on the history only.
    pub forecast: Vec<f64>,
    pub trend: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub likelihood: Likelihood,
    pub patients: Vec<PatientScore>,
}

fn pooled<'a>(items: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> (Vec<f64>, Vec<f64>) {
    let (mut p, mut y) = (Vec::new(), Vec::new());
    for (a, b) in items {
        p.extend_from_slice(a);
        y.extend_from_slice(b);
    }
    (p, y)
}

fn score(pred: &[f64], targets: &[f64], likelihood: Likelihood) -> Option<f64> {
    match likelihood {
        Likelihood::Gaussian => metrics::rmse(pred, targets),
        Likelihood::Bernoulli => metrics::auc(pred, &targets.iter().map(|y| *y > 0.5).collect::<Vec<_>>()),
    }
}

impl EvalReport {
    fn overall(&self, pick: fn(&PatientScore) -> &[f64]) -> Option<f64> {
        let (p, y) = pooled(self.patients.iter().map(|s| (pick(s), s.targets.as_slice())));
        score(&p, &y, self.likelihood)
    }

    /// RMSE or AUC of the one-step-ahead predictions over every scored step.
    pub fn sequential(&self) -> Option<f64> {
        self.overall(|s| &s.sequential)
    }

    pub fn forecast(&self) -> Option<f64> {
        self.overall(|s| &s.forecast)
    }

    pub fn trend(&self) -> Option<f64> {
        self.overall(|s| &s.trend)
    }
}

/// Adapts to each patient's history prefix and scores the remaining steps.
pub fn evaluate(cfg: &RunConfig, model: &DmeGpModel, test: &[PatientSeries], source_steps: Option<usize>) -> Result<EvalReport> {
    let adapt = cfg.adaptation_config()?;
    let mut patients = Vec::with_capacity(test.len());
    for s in test {
        let h = history_len(cfg, source_steps, s.len());
        let history = s.prefix(h);
        let adapted = adapt_new_patient(&history, model, &adapt)?;
        let value = |d: &dmegp_core::PredictiveDistribution| d.class_probability.unwrap_or(d.mean);
        let seq = sequential_forecast(s, &adapted.params, model)?;
        let fc = forecast_after(&history, &s.inputs[h..], &adapted.params, model)?;
        patients.push(PatientScore {
            id: s.id.clone(),
            history: h,
            sequential: seq[h..].iter().map(value).collect(),
            forecast: fc.iter().map(value).collect(),
            trend: seq[h..].iter().map(|d| d.trend).collect(),
            targets: s.targets[h..].to_vec(),
        });
    }
    Ok(EvalReport { likelihood: model.config.likelihood, patients })
}

fn test_cohort(cfg: &RunConfig, data: Option<&Path>, norm: &DatasetManifest, model: &DmeGpModel) -> Result<(Vec<PatientSeries>, Vec<PatientSeries>, Option<usize>)> {
    match data {
        Some(p) => {
            let raw = io::load_csv(p)?;
            check_dim(model, &raw, "data")?;
            Ok((data::standardize(&raw, norm)?, raw, None))
        }
        None => {
            let raw = dataset::resolve_raw(cfg)?;
            let ds = dataset::resolve(cfg)?;
            Ok((ds.test, raw.test, ds.history_steps))
        }
    }
}

/// `eval`: writes overall and per-patient metrics.
pub fn eval(cfg: &RunConfig, model_path: &Path, data: Option<&Path>, out_dir: &Path) -> Result<EvalReport> {
    let (model, norm) = load_model(model_path)?;
    let (test, _, steps) = test_cohort(cfg, data, &norm, &model)?;
    if test.is_empty() {
        return Err(CliError::Data("no test patients to evaluate".into()));
    }
    let report = evaluate(cfg, &model, &test, steps)?;
    let lik = report.likelihood;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let (metric, header_names) = match lik {
        Likelihood::Gaussian => ("rmse", ["rmse", "forecast_rmse", "trend_rmse"]),
        Likelihood::Bernoulli => ("auc", ["auc", "forecast_auc", "trend_auc"]),
    };
    let steps_total: usize = report.patients.iter().map(|p| p.targets.len()).sum();
    let mut rows = vec![vec![
        "overall".into(),
        String::new(),
        steps_total.to_string(),
        opt(report.sequential()),
        opt(report.forecast()),
        opt(report.trend()),
    ]];
    for p in &report.patients {
        rows.push(vec![
            "patient".into(),
            p.id.clone(),
            p.targets.len().to_string(),
            opt(score(&p.sequential, &p.targets, lik)),
            opt(score(&p.forecast, &p.targets, lik)),
            opt(score(&p.trend, &p.targets, lik)),
        ]);
    }
    let mut header: Vec<String> = ["scope", "patient_id", "steps"].map(String::from).into();
    header.extend(header_names.map(String::from));
    save_table(&out_dir.join("eval_metrics.csv"), &header, &rows)?;
    let mut args = BTreeMap::from([("model".to_string(), path_arg(model_path)), ("out".to_string(), path_arg(out_dir))]);
    if let Some(d) = data {
        args.insert("data".into(), path_arg(d));
    }
    write_run_manifest(cfg, out_dir, "eval", args)?;
    log::info!("{metric} {}", opt(report.sequential()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: SharingMode,
    pub best_epoch: usize,
    pub validation_metric: f64,
    pub report: EvalReport,
}

/// `ablate`: trains every sharing mode on identical data and seeds.
pub fn ablate<E: BatchMap>(cfg: &RunConfig, exec: &E) -> Result<Vec<AblationRow>> {
    let ds = dataset::resolve(cfg)?;
    let mut table = Vec::new();
    for mode in SharingMode::ALL {
        let mut c = cfg.clone();
        c.model.sharing = mode.label().into();
        let out = fit_dataset(&c, &ds, exec)?;
        let validation_metric = out
            .history
            .iter()
            .find(|l| l.epoch == out.best_epoch)
            .map_or(out.initial_validation, |l| l.validation_metric);
        let report = evaluate(&c, &out.model, &ds.test, ds.history_steps)?;
        table.push(AblationRow { mode, best_epoch: out.best_epoch, validation_metric, report });
    }
    let names = match cfg.task()? {
        TaskKind::Regression => ["test_rmse", "test_forecast_rmse", "test_trend_rmse"],
        TaskKind::Classification => ["test_auc", "test_forecast_auc", "test_trend_auc"],
    };
    let mut header: Vec<String> = ["mode", "best_epoch", "validation_metric"].map(String::from).into();
    header.extend(names.map(String::from));
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                r.mode.label().into(),
                r.best_epoch.to_string(),
                fmt(r.validation_metric),
                opt(r.report.sequential()),
                opt(r.report.forecast()),
                opt(r.report.trend()),
            ]
        })
        .collect();
    save_table(&cfg.output_dir.join("ablation.csv"), &header, &rows)?;
    write_run_manifest(cfg, &cfg.output_dir, "ablate", BTreeMap::new())?;
    Ok(table)
}

#[derive(Debug, Clone, Default)]
pub struct PlotArgs {
    pub data: Option<PathBuf>,
    pub patient: Option<String>,
    pub history_steps: Option<usize>,
}

/// `plot-data`: one row per step of a patient with the predictive band and
/// the mean-function trend, after conditioning on a history prefix.
pub fn plot_data(cfg: &RunConfig, model_path: &Path, args: &PlotArgs, out: &Path) -> Result<usize> {
    let (model, norm) = load_model(model_path)?;
    if model.config.likelihood != Likelihood::Gaussian {
        return Err(CliError::Config("plot-data needs a regression model".into()));
    }
    let (cohort, raw, steps) = test_cohort(cfg, args.data.as_deref(), &norm, &model)?;
    let pos = match &args.patient {
        Some(id) => cohort
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| CliError::Data(format!("patient `{id}` not found")))?,
        None if !cohort.is_empty() => 0,
        None => return Err(CliError::Data("no patients to plot".into())),
    };
    let (series, raw) = (&cohort[pos], &raw[pos]);
    let h = args.history_steps.map_or_else(|| history_len(cfg, steps, series.len()), |h| h.min(series.len()));
    let history = series.prefix(h);
    let adapted = adapt_new_patient(&history, &model, &cfg.adaptation_config()?)?;
    let preds = forecast_after(&history, &series.inputs, &adapted.params, &model)?;
    let d = model.config.arch.input_dim;
    let mut header: Vec<String> = vec!["time_index".into()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend(["target", "observed", "mean", "std", "lower", "upper", "trend"].map(String::from));
    let rows: Vec<Vec<String>> = preds
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let sd = p.std_dev();
            let mut row = vec![t.to_string()];
            row.extend(raw.inputs[t].iter().map(|v| fmt(*v)));
            row.extend([
                fmt(series.targets[t]),
                u8::from(t < h).to_string(),
                fmt(p.mean),
                fmt(sd),
                fmt(p.mean - sd),
                fmt(p.mean + sd),
                fmt(p.trend),
            ]);
            row
        })
        .collect();
    save_table(out, &header, &rows)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut margs = BTreeMap::from([
        ("model".to_string(), path_arg(model_path)),
        ("patient".to_string(), series.id.clone()),
        ("history_steps".to_string(), h.to_string()),
        ("out".to_string(), path_arg(out)),
    ]);
    if let Some(p) = &args.data {
        margs.insert("data".into(), path_arg(p));
    }
    write_run_manifest(cfg, dir, "plot-data", margs)?;
    Ok(rows.len())
}

/// `gen-data`: writes the raw cohort as `train.csv` (training and validation
/// patients) and `test.csv`, plus the split assignment.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = dataset::resolve_raw(cfg)?;
    let d = ds.input_dim()?;
    let dir = &cfg.output_dir;
    let train: Vec<PatientSeries> = ds.train.iter().chain(&ds.validation).cloned().collect();
    io::save_csv(&dir.join("train.csv"), &train, d)?;
    io::save_csv(&dir.join("test.csv"), &ds.test, d)?;
    save_manifest(&dir.join(DATASET_MANIFEST_FILE), &ds.manifest)?;
    write_run_manifest(cfg, dir, "gen-data", BTreeMap::new())?;
    Ok(ds)
}
