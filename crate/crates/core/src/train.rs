//! Minibatch alternating gradient ascent on the cohort log marginal.
//!
//! Each batch first moves the shared networks along the batch-summed gradient
//! (less an l2 penalty), then recomputes and applies every member's own kernel
//! gradient. Shared and per-patient groups keep separate Adam states.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::error::{Error, Result};
use crate::infer::{self, AdaptationConfig};
use crate::metrics;
use crate::model::{evaluate_patient, DmeGpModel, Likelihood, ModelConfig, PatientGradients, PatientParams, PatientSeries};
use crate::nn::ParamView;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, first_moment: vec![0.0; len], second_moment: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam step, ascending `grads`.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::ShapeMismatch { params: params.len(), grads: grads.len() });
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(beta1, t);
    let c2 = 1.0 - libm::pow(beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] += learning_rate * (m / c1) / (libm::sqrt(v / c2) + epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Coefficient of `-l2/2 |w, v|^2` added to the objective.
    pub l2: f64,
    pub seed: u64,
    pub theta_inner_steps: usize,
    pub shared_optimizer: AdamConfig,
    pub theta_optimizer: AdamConfig,
    /// Share of patients held out for validation when none is supplied.
    pub validation_fraction: f64,
    /// Adaptation applied to validation patients before scoring them.
    pub validation_adaptation: AdaptationConfig,
    /// Placeholder; only 0 is accepted.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 100,
            patience: 10,
            l2: 1e-4,
            seed: 0,
            theta_inner_steps: 1,
            shared_optimizer: AdamConfig::default(),
            theta_optimizer: AdamConfig::default(),
            validation_fraction: 0.2,
            validation_adaptation: AdaptationConfig::default(),
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.theta_inner_steps == 0 {
            return bad("theta inner step count must be positive");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 coefficient must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.dropout != 0.0 {
            return bad("dropout is not implemented; set it to 0");
        }
        for a in [&self.shared_optimizer, &self.theta_optimizer, &self.validation_adaptation.optimizer] {
            if !(a.learning_rate >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
                return bad("invalid Adam settings");
            }
        }
        Ok(())
    }
}

/// Order-preserving map over a batch, possibly in parallel.
pub trait BatchMap {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R>;
}

/// Runs every item on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl BatchMap for Serial {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        items.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-patient log marginal over the patients evaluated this epoch.
    pub train_log_likelihood: f64,
    /// Mean log marginal (regression) or AUC (classification); NaN when unset.
    pub validation_metric: f64,
    /// Patient evaluations skipped for numerical failure.
    pub skipped: usize,
}

/// Optimizer states carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub shared: OptimizerState,
    pub per_patient: BTreeMap<String, OptimizerState>,
    /// Used by the modes with a single shared kernel.
    pub shared_kernel: Option<OptimizerState>,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(model: &DmeGpModel, cfg: &TrainConfig) -> Self {
        Self {
            shared: OptimizerState::new(cfg.shared_optimizer.clone(), model.shared.param_count()),
            per_patient: BTreeMap::new(),
            shared_kernel: model.shared_kernel.as_ref().map(|k| OptimizerState::new(cfg.theta_optimizer.clone(), k.len())),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

fn patient_flat(p: &PatientParams) -> Vec<f64> {
    let mut v = p.kernel.to_flat();
    if let Some(e) = &p.embedding {
        v.extend(e.to_flat());
    }
    v
}

fn set_patient_flat(p: &mut PatientParams, flat: &[f64]) -> Result<()> {
    let nk = p.kernel.len();
    p.kernel.set_flat(&flat[..nk])?;
    if let Some(e) = &mut p.embedding {
        e.set_flat(&flat[nk..])?;
    }
    Ok(())
}

fn patient_grad_flat(g: &PatientGradients, per_patient_embedding: bool) -> Vec<f64> {
    let mut v = g.kernel.to_flat();
    if per_patient_embedding {
        v.extend(g.embedding.to_flat());
    }
    v
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. } | Error::NewtonDivergence(_))
}

type Evaluation = (f64, PatientGradients);

/// Evaluates the batch, skipping numerical failures with a warning.
fn evaluate_batch<E: BatchMap>(
    batch: &[&PatientSeries],
    model: &DmeGpModel,
    exec: &E,
) -> Result<Vec<Option<Evaluation>>> {
    let results = exec.map(batch, &|s: &&PatientSeries| {
        let params = model.resolve(&s.id)?;
        evaluate_patient(s, model, &params, true).map(|(v, g)| (v, g.expect("gradients requested")))
    });
    results
        .into_iter()
        .zip(batch)
        .map(|(r, s)| match r {
            Ok(ev) => Ok(Some(ev)),
            Err(e) if is_numerical(&e) => {
                log::warn!("skipping patient `{}` this batch: {e}", s.id);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// One pass over a seeded shuffle of `data` in minibatches.
pub fn train_epoch<E: BatchMap>(
    model: &mut DmeGpModel,
    data: &[PatientSeries],
    cfg: &TrainConfig,
    state: &mut TrainingState,
    exec: &E,
) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::EmptyCohort);
    }
    for s in data {
        model.ensure_patient(&s.id);
    }
    let sharing = model.config.sharing;
    let per_patient_embedding = sharing.per_patient_embedding();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    state.epoch += 1;

    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&PatientSeries> = chunk.iter().map(|i| &data[*i]).collect();
        let evals = evaluate_batch(&batch, model, exec)?;
        skipped += evals.iter().filter(|e| e.is_none()).count();
        for (v, _) in evals.iter().flatten() {
            total += v;
            counted += 1;
        }

        if !per_patient_embedding {
            let mut sum = model.shared.zeros_like();
            let mut any = false;
            for (_, g) in evals.iter().flatten() {
                any = true;
                add_into(&mut sum.embedding, &g.embedding);
                add_into(&mut sum.mean, &g.mean);
            }
            if any {
                let mut params = model.shared.to_flat();
                let mut grads = sum.to_flat();
                for (g, w) in grads.iter_mut().zip(&params) {
                    *g -= cfg.l2 * w;
                }
                adam_step(&mut state.shared, &mut params, &grads)?;
                model.shared.set_flat(&params)?;
            }
        }

        for _ in 0..cfg.theta_inner_steps {
            let evals = evaluate_batch(&batch, model, exec)?;
            if let Some(kernel) = model.shared_kernel.as_mut() {
                let mut sum = vec![0.0; kernel.len()];
                let mut any = false;
                for (_, g) in evals.iter().flatten() {
                    any = true;
                    sum.iter_mut().zip(g.kernel.to_flat()).for_each(|(a, b)| *a += b);
                }
                if any {
                    let opt = state
                        .shared_kernel
                        .get_or_insert_with(|| OptimizerState::new(cfg.theta_optimizer.clone(), sum.len()));
                    let mut flat = kernel.to_flat();
                    adam_step(opt, &mut flat, &sum)?;
                    kernel.set_flat(&flat)?;
                }
                continue;
            }
            for (s, ev) in batch.iter().zip(evals) {
                let Some((_, g)) = ev else { continue };
                let params = model.patients.get_mut(&s.id).ok_or_else(|| Error::UnknownPatient(s.id.clone()))?;
                let mut flat = patient_flat(params);
                let opt = state
                    .per_patient
                    .entry(s.id.clone())
                    .or_insert_with(|| OptimizerState::new(cfg.theta_optimizer.clone(), flat.len()));
                adam_step(opt, &mut flat, &patient_grad_flat(&g, per_patient_embedding))?;
                set_patient_flat(params, &flat)?;
            }
        }
    }
    let train_log_likelihood = if counted == 0 { f64::NEG_INFINITY } else { total / counted as f64 };
    Ok(EpochLog { epoch: state.epoch, train_log_likelihood, validation_metric: f64::NAN, skipped })
}

fn add_into<P: ParamView>(acc: &mut P, g: &P) {
    let flat = g.to_flat();
    let mut i = 0;
    acc.for_each_slice_mut(&mut |s| {
        for v in s.iter_mut() {
            *v += flat[i];
            i += 1;
        }
    });
}

/// Default validation score: mean history log marginal after adaptation
/// (regression), or AUC of one-step-ahead class probabilities (classification).
pub fn validation_metric(model: &DmeGpModel, validation: &[PatientSeries], cfg: &AdaptationConfig) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::EmptyCohort);
    }
    match model.config.likelihood {
        Likelihood::Gaussian => {
            let mut total = 0.0;
            for s in validation {
                let a = infer::adapt_new_patient(s, model, cfg)?;
                total += a.log_marginal;
            }
            Ok(total / validation.len() as f64)
        }
        Likelihood::Bernoulli => {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for s in validation {
                let a = infer::adapt_new_patient(s, model, cfg)?;
                for (d, y) in infer::sequential_forecast(s, &a.params, model)?.iter().zip(&s.targets) {
                    scores.push(d.mean);
                    labels.push(*y > 0.5);
                }
            }
            Ok(metrics::auc(&scores, &labels).unwrap_or(0.5))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// Snapshot at the best validation epoch; the initial model when no epoch ran.
    pub model: DmeGpModel,
    pub history: Vec<EpochLog>,
    pub initial_validation: f64,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub validation_ids: Vec<String>,
}

/// Trains from a fresh model, scoring with [`validation_metric`]. Without an
/// explicit validation set, one is carved from `data` by patient.
pub fn fit<E: BatchMap>(
    data: &[PatientSeries],
    validation: Option<&[PatientSeries]>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    exec: &E,
) -> Result<FitOutput> {
    let (train, val) = match validation {
        Some(v) => (data.to_vec(), v.to_vec()),
        None => carve_validation(data, cfg)?,
    };
    let adapt = cfg.validation_adaptation.clone();
    if val.is_empty() {
        let metric = |m: &DmeGpModel| Ok(train_mean(m, &train));
        return fit_with_metric(&train, cfg, model_cfg, exec, &metric, Vec::new());
    }
    let ids = val.iter().map(|s| s.id.clone()).collect();
    let metric = move |m: &DmeGpModel| validation_metric(m, &val, &adapt);
    fit_with_metric(&train, cfg, model_cfg, exec, &metric, ids)
}

fn train_mean(model: &DmeGpModel, train: &[PatientSeries]) -> f64 {
    let mut m = model.clone();
    let mut total = 0.0;
    for s in train {
        m.ensure_patient(&s.id);
        total += crate::model::patient_log_marginal(s, &m).unwrap_or(f64::NEG_INFINITY);
    }
    total / train.len() as f64
}

fn carve_validation(data: &[PatientSeries], cfg: &TrainConfig) -> Result<(Vec<PatientSeries>, Vec<PatientSeries>)> {
    if data.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if cfg.validation_fraction == 0.0 {
        return Ok((data.to_vec(), Vec::new()));
    }
    let f = cfg.validation_fraction;
    let split = data::split_by_patient(data, [1.0 - f, f, 0.0], cfg.seed)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in data {
        match split.get(&s.id) {
            Some(data::Split::Validation) => val.push(s.clone()),
            _ => train.push(s.clone()),
        }
    }
    if train.is_empty() {
        return Ok((data.to_vec(), Vec::new()));
    }
    Ok((train, val))
}

/// Early-stopped training loop with a caller-supplied validation score
/// (higher is better).
pub fn fit_with_metric<E: BatchMap>(
    train: &[PatientSeries],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    exec: &E,
    metric: &dyn Fn(&DmeGpModel) -> Result<f64>,
    validation_ids: Vec<String>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCohort);
    }
    model_cfg.arch.validate()?;
    let mut model = DmeGpModel::new(model_cfg.clone(), cfg.seed)?;
    for s in train {
        model.ensure_patient(&s.id);
    }
    let initial_validation = metric(&model)?;
    let mut out = FitOutput { model: model.clone(), history: Vec::new(), initial_validation, best_epoch: 0, validation_ids };
    let mut state = TrainingState::new(&model, cfg);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        let mut log = train_epoch(&mut model, train, cfg, &mut state, exec)?;
        let score = metric(&model)?;
        log.validation_metric = score;
        let epoch = log.epoch;
        out.history.push(log);
        if score > best {
            best = score;
            stale = 0;
            out.model = model.clone();
            out.best_epoch = epoch;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(out)
}
