//! Training regimes for the LSTM forecaster: population pretraining,
//! transfer finetuning and per-patient training from scratch, plus seed
//! ensembling and a seeded random hyperparameter search.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgm_data::{
    extract_windows, fit_standardizer, proportional_split, GlucoseSeries, HistoryWindow, StandardizationParams, WindowMode,
};
use crate::error::{Error, Result};
use crate::lstm_net::{batch_loss_and_gradients, init_params, load_params, save_params, predict_next, rollout_batch, Architecture, Gradients, NetworkParams, TrainSample};
use crate::synth::GaussianStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Radam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Slots between consecutive training windows.
    pub window_step: usize,
    /// Chronological validation share of a patient's windows.
    pub validation_fraction: f64,
    /// Seed of the population train/validation patient split.
    pub split_seed: u64,
    /// Optional cap on training windows drawn per epoch (a fresh shuffled
    /// subset each epoch). `None` is a full pass.
    pub max_windows_per_epoch: Option<usize>,
    /// Optional cap on validation windows, taken evenly spaced.
    pub max_validation_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::population()
    }
}

impl TrainConfig {
    /// RAdam at 1e-3 over windows every 20 minutes.
    pub fn population() -> Self {
        Self {
            architecture: Architecture::default(),
            batch_size: 64,
            optimizer: OptimizerKind::Radam,
            learning_rate: 1e-3,
            momentum: 0.9,
            plateau_patience: 10,
            plateau_factor: 10.0,
            early_stop_patience: 20,
            max_epochs: 500,
            seeds: vec![0, 1, 2],
            window_step: 4,
            validation_fraction: 0.1,
            split_seed: 0,
            max_windows_per_epoch: None,
            max_validation_windows: None,
        }
    }

    /// Momentum SGD at 1e-4 over every window.
    pub fn finetune() -> Self {
        Self { optimizer: OptimizerKind::SgdMomentum, learning_rate: 1e-4, window_step: 1, ..Self::population() }
    }

    /// RAdam at 1e-3 over every window.
    pub fn scratch() -> Self {
        Self { window_step: 1, ..Self::population() }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.window_step == 0 {
            return bad("batch_size and window_step must be at least 1".into());
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.plateau_factor <= 1.0 {
            return bad(format!("learning rate {} / plateau factor {}", self.learning_rate, self.plateau_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("momentum and validation_fraction must lie in [0, 1)".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.max_windows_per_epoch == Some(0) || self.max_validation_windows == Some(0) {
            return bad("window caps must be at least 1".into());
        }
        Ok(())
    }
}

pub const RADAM_BETA1: f64 = 0.9;
pub const RADAM_BETA2: f64 = 0.999;
pub const RADAM_EPS: f64 = 1e-8;
/// The adaptive step is used once the length of the approximated simple
/// moving average exceeds this.
pub const RADAM_RHO_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Radam { m: Vec<f64>, v: Vec<f64>, step: u64, lr: f64 },
    Momentum { velocity: Vec<f64>, momentum: f64, step: u64, lr: f64 },
}

impl OptimizerState {
    pub fn radam(n: usize, lr: f64) -> Self {
        Self::Radam { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr }
    }

    pub fn momentum(n: usize, lr: f64, momentum: f64) -> Self {
        Self::Momentum { velocity: vec![0.0; n], momentum, step: 0, lr }
    }

    pub fn for_config(config: &TrainConfig, n: usize) -> Self {
        match config.optimizer {
            OptimizerKind::Radam => Self::radam(n, config.learning_rate),
            OptimizerKind::SgdMomentum => Self::momentum(n, config.learning_rate, config.momentum),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Self::Radam { lr, .. } | Self::Momentum { lr, .. } => *lr,
        }
    }

    pub fn set_learning_rate(&mut self, new_lr: f64) {
        match self {
            Self::Radam { lr, .. } | Self::Momentum { lr, .. } => *lr = new_lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Self::Radam { step, .. } | Self::Momentum { step, .. } => *step,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Self::Radam { .. } => radam_step(params, grads, self),
            Self::Momentum { .. } => sgd_momentum_step(params, grads, self),
        }
    }
}

fn check_step(params: &[f64], grads: &[f64], state_len: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state_len {
        return Err(Error::ShapeMismatch(format!("{} parameters, {} gradients, state {}", params.len(), grads.len(), state_len)));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i}")));
    }
    Ok(())
}

/// Rectified Adam. While the variance estimate is unreliable
/// (`rho_t <= 5`) the update is bias-corrected momentum without the
/// adaptive denominator.
pub fn radam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    let OptimizerState::Radam { m, v, step, lr } = state else {
        return Err(Error::InvalidArgument("radam_step needs RAdam state".into()));
    };
    check_step(params, grads, m.len())?;
    *step += 1;
    let t = *step as f64;
    let (b1, b2) = (RADAM_BETA1, RADAM_BETA2);
    let bc1 = 1.0 - b1.powf(t);
    let b2t = b2.powf(t);
    let bc2 = 1.0 - b2t;
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho_inf - 2.0 * t * b2t / bc2;
    let rect = (rho_t > RADAM_RHO_THRESHOLD)
        .then(|| ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        params[i] -= match rect {
            Some(r) => *lr * r * m_hat * bc2.sqrt() / (v[i].sqrt() + RADAM_EPS),
            None => *lr * m_hat,
        };
    }
    Ok(())
}

/// `v <- mu v + g; w <- w - lr v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    let OptimizerState::Momentum { velocity, momentum, step, lr } = state else {
        return Err(Error::InvalidArgument("sgd_momentum_step needs momentum state".into()));
    };
    check_step(params, grads, velocity.len())?;
    *step += 1;
    for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = *momentum * *v + g;
        *w -= *lr * *v;
    }
    Ok(())
}

/// Reduce-on-plateau: after `patience` epochs without strict improvement
/// the learning rate is divided by `factor` and the counter restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub lr: f64,
}

impl PlateauSchedule {
    pub fn new(initial_loss: f64, lr: f64, patience: usize, factor: f64) -> Self {
        Self { best: initial_loss, bad_epochs: 0, patience, factor, lr }
    }

    /// Returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
/// Learning-rate reductions do not reset this counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub patience: usize,
}

impl EarlyStopping {
    pub fn new(initial_loss: f64, patience: usize) -> Self {
        Self { best: initial_loss, best_epoch: 0, bad_epochs: 0, patience }
    }

    pub fn step(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Population,
    Finetuned,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
    pub plateau_counter: usize,
    pub stop_counter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub regime: Regime,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_validation_loss: f64,
    pub best_validation_loss: f64,
    pub standardizer: StandardizationParams,
    pub train_windows: usize,
    pub validation_windows: usize,
    /// Finetuning found no usable windows and returned the pretrained
    /// parameters unchanged.
    pub fallback: bool,
    pub patients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: NetworkParams,
    pub provenance: Provenance,
    pub log: Vec<EpochLog>,
}

impl TrainedModel {
    /// Writes `<stem>.bin` (parameters), `<stem>.json` (provenance) and
    /// `<stem>.log.jsonl` (epoch log) into `dir`; returns the file names.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let names = [format!("{stem}.bin"), format!("{stem}.json"), format!("{stem}.log.jsonl")];
        fs::write(dir.join(&names[0]), save_params(&self.params)?)?;
        fs::write(dir.join(&names[1]), serde_json::to_vec_pretty(&self.provenance)?)?;
        fs::write(dir.join(&names[2]), self.log_jsonl()?)?;
        Ok(names.to_vec())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let params = load_params(&fs::read(dir.join(format!("{stem}.bin")))?)?;
        let provenance: Provenance = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let log = match fs::read_to_string(dir.join(format!("{stem}.log.jsonl"))) {
            Ok(text) => text.lines().map(serde_json::from_str).collect::<std::result::Result<_, _>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { params, provenance, log })
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn to_samples(windows: &[HistoryWindow], s: &StandardizationParams) -> Vec<TrainSample> {
    windows
        .iter()
        .map(|w| TrainSample {
            values: w.values.iter().map(|v| s.standardize(*v)).collect(),
            target: s.standardize(w.target.expect("train windows carry a target")),
        })
        .collect()
}

fn evenly_spaced<T: Clone>(items: Vec<T>, cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if items.len() > c => (0..c).map(|i| items[i * items.len() / c].clone()).collect(),
        _ => items,
    }
}

/// One-step RMSE of full-window predictions, in standardized units.
pub fn validation_rmse(params: &NetworkParams, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no validation windows".into()));
    }
    let k = samples[0].values.len();
    let mut sse = 0.0;
    for chunk in samples.chunks(256) {
        let inputs = ndarray::Array2::from_shape_fn((chunk.len(), k), |(i, t)| chunk[i].values[t]);
        let y = predict_next(params, inputs.view())?;
        sse += chunk.iter().zip(y.iter()).map(|(s, p)| (p - s.target).powi(2)).sum::<f64>();
    }
    let rmse = (sse / samples.len() as f64).sqrt();
    if !rmse.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(rmse)
}

/// Windows of every series in training mode at the configured step.
pub fn training_windows(series: &[GlucoseSeries], config: &TrainConfig) -> Result<Vec<HistoryWindow>> {
    let mut out = Vec::new();
    for s in series {
        out.extend(extract_windows(s, config.architecture.window, config.window_step, WindowMode::Train)?);
    }
    Ok(out)
}

struct RunInput<'a> {
    regime: Regime,
    seed: u64,
    init: NetworkParams,
    train: &'a [TrainSample],
    validation: &'a [TrainSample],
    standardizer: StandardizationParams,
    patients: Vec<String>,
}

/// Shared epoch loop: seeded reshuffle each epoch, optimizer steps per
/// batch, plateau schedule and early stopping on the validation RMSE, and
/// the best-validation snapshot returned.
fn run_training(input: RunInput<'_>, config: &TrainConfig) -> Result<TrainedModel> {
    let RunInput { regime, seed, init, train, validation, standardizer, patients } = input;
    let mut params = init;
    let initial = validation_rmse(&params, validation)?;
    let mut best_params = params.clone();
    let mut optimizer = OptimizerState::for_config(config, params.data.len());
    let mut plateau = PlateauSchedule::new(initial, config.learning_rate, config.plateau_patience, config.plateau_factor);
    let mut stopper = EarlyStopping::new(initial, config.early_stop_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(3);
    let mut dropout_rng = GaussianStream::with_stream(seed, 4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let take = config.max_windows_per_epoch.map_or(order.len(), |c| c.min(order.len()));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order[..take].chunks(config.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads): (f64, Gradients) = batch_loss_and_gradients(&params, &batch, Some(&mut dropout_rng))?;
            optimizer.apply(&mut params.data, &grads.data)?;
            loss_sum += loss;
            batches += 1;
        }
        let val = validation_rmse(&params, validation)?;
        if val < stopper.best {
            best_params = params.clone();
        }
        let lr = plateau.step(val);
        optimizer.set_learning_rate(lr);
        let decision = stopper.step(epoch, val);
        epochs_run = epoch;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            validation_loss: val,
            learning_rate: lr,
            plateau_counter: plateau.bad_epochs,
            stop_counter: stopper.bad_epochs,
        });
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok(TrainedModel {
        params: best_params,
        provenance: Provenance {
            regime,
            seed,
            epochs_run,
            best_epoch: stopper.best_epoch,
            initial_validation_loss: initial,
            best_validation_loss: stopper.best,
            standardizer,
            train_windows: train.len(),
            validation_windows: validation.len(),
            fallback: false,
            patients,
        },
        log,
    })
}

/// Population training data after the patient-level validation split.
#[derive(Debug, Clone)]
pub struct PopulationData {
    pub train_patients: Vec<String>,
    pub validation_patients: Vec<String>,
    pub standardizer: StandardizationParams,
    pub train: Vec<TrainSample>,
    pub validation: Vec<TrainSample>,
}

/// Split patients 30:5 into training and validation, fit the standardizer
/// on the training patients and cut standardized windows.
pub fn prepare_population(series: &[GlucoseSeries], config: &TrainConfig) -> Result<PopulationData> {
    config.validate()?;
    let ids: Vec<String> = series.iter().map(|s| s.patient_id.clone()).collect();
    let (train_ids, val_ids) = proportional_split(&ids, 5, 35, config.split_seed)?;
    let pick = |set: &[String]| series.iter().filter(|s| set.contains(&s.patient_id)).cloned().collect::<Vec<_>>();
    let (train_series, val_series) = (pick(&train_ids), pick(&val_ids));
    let standardizer = fit_standardizer(&train_series)?;
    let train = to_samples(&training_windows(&train_series, config)?, &standardizer);
    let validation = to_samples(&evenly_spaced(training_windows(&val_series, config)?, config.max_validation_windows), &standardizer);
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InsufficientData(format!("{} training and {} validation windows", train.len(), validation.len())));
    }
    Ok(PopulationData { train_patients: train_ids, validation_patients: val_ids, standardizer, train, validation })
}

/// One population model per configured seed.
pub fn train_population(series: &[GlucoseSeries], config: &TrainConfig) -> Result<Vec<TrainedModel>> {
    let data = prepare_population(series, config)?;
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            run_training(
                RunInput {
                    regime: Regime::Population,
                    seed,
                    init: init_params(config.architecture, seed),
                    train: &data.train,
                    validation: &data.validation,
                    standardizer: data.standardizer,
                    patients: data.train_patients.clone(),
                },
                config,
            )
        })
        .collect()
}

/// Chronological split: the last `fraction` of windows (at least one)
/// validate. A single window serves both roles.
pub fn chronological_split(windows: Vec<HistoryWindow>, fraction: f64) -> (Vec<HistoryWindow>, Vec<HistoryWindow>) {
    let n = windows.len();
    if n <= 1 {
        return (windows.clone(), windows);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut train = windows;
    let val = train.split_off(n - n_val);
    (train, val)
}

fn patient_samples(series: &GlucoseSeries, config: &TrainConfig, s: &StandardizationParams) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    let windows = extract_windows(series, config.architecture.window, config.window_step, WindowMode::Train)?;
    let (train, val) = chronological_split(windows, config.validation_fraction);
    Ok((to_samples(&train, s), to_samples(&evenly_spaced(val, config.max_validation_windows), s)))
}

/// Continue training a population model on one patient's training slice,
/// keeping the population standardizer.
pub fn finetune_patient(pretrained: &TrainedModel, series: &GlucoseSeries, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if pretrained.params.arch != config.architecture {
        return Err(Error::ShapeMismatch("pretrained architecture differs from the finetuning config".into()));
    }
    let standardizer = pretrained.provenance.standardizer;
    let (train, validation) = patient_samples(series, config, &standardizer)?;
    let seed = pretrained.provenance.seed;
    if train.is_empty() {
        let mut out = pretrained.clone();
        out.provenance.regime = Regime::Finetuned;
        out.provenance.fallback = true;
        out.provenance.epochs_run = 0;
        out.provenance.patients = vec![series.patient_id.clone()];
        out.log.clear();
        return Ok(out);
    }
    run_training(
        RunInput {
            regime: Regime::Finetuned,
            seed,
            init: pretrained.params.clone(),
            train: &train,
            validation: &validation,
            standardizer,
            patients: vec![series.patient_id.clone()],
        },
        config,
    )
}

/// Train a fresh network on one patient's slice with its own
/// standardizer, one model per configured seed.
pub fn train_patient_scratch(series: &GlucoseSeries, config: &TrainConfig) -> Result<Vec<TrainedModel>> {
    config.validate()?;
    let standardizer = fit_standardizer(std::slice::from_ref(series))?;
    let (train, validation) = patient_samples(series, config, &standardizer)?;
    if train.is_empty() {
        return Err(Error::InsufficientData(format!("patient {} has no fully observed training window", series.patient_id)));
    }
    config
        .seeds
        .iter()
        .map(|&seed| {
            run_training(
                RunInput {
                    regime: Regime::Scratch,
                    seed,
                    init: init_params(config.architecture, seed),
                    train: &train,
                    validation: &validation,
                    standardizer,
                    patients: vec![series.patient_id.clone()],
                },
                config,
            )
        })
        .collect()
}

/// Windows rolled out together; bounds the forward caches' memory.
const ROLLOUT_CHUNK: usize = 256;

/// Average of the members' autoregressive rollouts, in mmol/L, one row per
/// window. Windows are in mmol/L; each member rolls out on its own.
pub fn ensemble_forecast(models: &[TrainedModel], windows: &[Vec<f64>], steps: usize) -> Result<Vec<Vec<f64>>> {
    let first = models.first().ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let s = first.provenance.standardizer;
    if models.iter().any(|m| m.provenance.standardizer != s) {
        return Err(Error::MixedStandardizers);
    }
    if models.iter().any(|m| m.params.arch != first.params.arch) {
        return Err(Error::ShapeMismatch("ensemble members differ in architecture".into()));
    }
    let Some(k) = windows.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if windows.iter().any(|w| w.len() != k) {
        return Err(Error::ShapeMismatch("ensemble windows differ in length".into()));
    }
    let n = models.len() as f64;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(ROLLOUT_CHUNK) {
        let inputs = ndarray::Array2::from_shape_fn((chunk.len(), k), |(i, t)| s.standardize(chunk[i][t]));
        let mut sum = ndarray::Array2::<f64>::zeros((chunk.len(), steps));
        for m in models {
            sum += &rollout_batch(&m.params, inputs.view(), steps)?.mapv(|z| s.destandardize(z));
        }
        out.extend(sum.outer_iter().map(|row| row.iter().map(|v| v / n).collect::<Vec<f64>>()));
    }
    Ok(out)
}

/// Single-window form of [`ensemble_forecast`].
pub fn ensemble_predict(models: &[TrainedModel], window: &[f64], steps: usize) -> Result<Vec<f64>> {
    Ok(ensemble_forecast(models, &[window.to_vec()], steps)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub window: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { layers: vec![1, 2], hidden: vec![32, 64, 128], dropout: vec![0.0, 0.2, 0.5], window: vec![12, 24, 36] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub architecture: Architecture,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub trials: Vec<SearchTrial>,
}

/// `budget` architectures drawn with a seeded generator.
pub fn sample_architectures(space: &SearchSpace, budget: usize, seed: u64, mlp_hidden: usize) -> Result<Vec<Architecture>> {
    if space.layers.is_empty() || space.hidden.is_empty() || space.dropout.is_empty() || space.window.is_empty() {
        return Err(Error::InvalidArgument("every search dimension needs at least one value".into()));
    }
    let mut rng = GaussianStream::with_stream(seed, 5);
    let mut pick = |n: usize| (rng.next_u64() % n as u64) as usize;
    (0..budget)
        .map(|_| {
            let arch = Architecture {
                layers: space.layers[pick(space.layers.len())],
                hidden: space.hidden[pick(space.hidden.len())],
                mlp_hidden,
                dropout: space.dropout[pick(space.dropout.len())],
                window: space.window[pick(space.window.len())],
            };
            arch.validate().map(|_| arch)
        })
        .collect()
}

/// Random search over architectures, each trained as a single-seed
/// population model; the lowest best-validation RMSE wins. A zero budget
/// returns `base` untouched.
pub fn hyper_search(series: &[GlucoseSeries], space: &SearchSpace, budget: usize, base: &TrainConfig, seed: u64) -> Result<SearchOutcome> {
    let mut best = base.clone();
    let mut best_loss = f64::INFINITY;
    let mut trials = Vec::with_capacity(budget);
    for arch in sample_architectures(space, budget, seed, base.architecture.mlp_hidden)? {
        let config = TrainConfig { architecture: arch, seeds: vec![seed], ..base.clone() };
        let model = train_population(series, &config)?.remove(0);
        let loss = model.provenance.best_validation_loss;
        trials.push(SearchTrial { architecture: arch, validation_loss: loss });
        if loss < best_loss {
            best_loss = loss;
            best = TrainConfig { seeds: base.seeds.clone(), ..config };
        }
    }
    Ok(SearchOutcome { best, trials })
}
