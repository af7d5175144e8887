//! End-to-end experiment: population pretraining, then for every held-out
//! patient and training-slice length a finetuned LSTM ensemble, a scratch
//! LSTM ensemble and an auto-selected ARIMA, all scored against the
//! population LSTM and LOCF on the patient's final seven days.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arima::{auto_arima, forecast, ArimaModel, OrderBounds};
use crate::baseline_eval::{
    boxplot_csv, locf_forecast, patient_csv, population_csv, score_patient, EvalReport, ForecastSet, ModelId, PatientMetric, HORIZON_STEPS,
};
use crate::cgm_data::{extract_windows, fit_standardizer, partition_population, split_patient_period, DataPartition, GlucoseSeries, HistoryWindow, WindowMode, TRAIN_DAY_OPTIONS};
use crate::error::{Error, Result};
use crate::training::{ensemble_forecast, finetune_patient, train_patient_scratch, train_population, Provenance, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub partition_seed: u64,
    pub train_days: Vec<usize>,
    pub population: TrainConfig,
    pub finetune: TrainConfig,
    pub scratch: TrainConfig,
    pub arima_bounds: OrderBounds,
    /// Slots between evaluated forecast origins.
    pub eval_stride: usize,
    /// Only patient-level models and LOCF.
    pub skip_pretrained: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            partition_seed: 0,
            train_days: TRAIN_DAY_OPTIONS.to_vec(),
            population: TrainConfig::population(),
            finetune: TrainConfig::finetune(),
            scratch: TrainConfig::scratch(),
            arima_bounds: OrderBounds::default(),
            eval_stride: 1,
            skip_pretrained: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for c in [&self.population, &self.finetune, &self.scratch] {
            c.validate()?;
        }
        if self.finetune.architecture != self.population.architecture {
            return Err(Error::InvalidArgument("finetuning must use the population architecture".into()));
        }
        if self.scratch.architecture.window != self.population.architecture.window {
            return Err(Error::InvalidArgument("all LSTMs must share the history window length".into()));
        }
        if self.train_days.is_empty() || self.train_days.iter().any(|d| !TRAIN_DAY_OPTIONS.contains(d)) {
            return Err(Error::InvalidArgument(format!("train_days must be drawn from {TRAIN_DAY_OPTIONS:?}, got {:?}", self.train_days)));
        }
        if self.eval_stride == 0 {
            return Err(Error::InvalidArgument("eval_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.population.architecture.window
    }

    fn models(&self) -> Vec<ModelId> {
        ModelId::ALL.into_iter().filter(|m| !self.skip_pretrained || !matches!(m, ModelId::PopulationLstm | ModelId::FinetunedLstm)).collect()
    }
}

/// Outcome of one (patient, train_days) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub patient_id: String,
    pub train_days: usize,
    pub test_windows: usize,
    pub arima: Option<ArimaModel>,
    pub finetuned: Vec<Provenance>,
    pub scratch: Vec<Provenance>,
    /// Largest |forecast| of each LSTM family in its own standardized units.
    pub max_abs_standardized: BTreeMap<ModelId, f64>,
    pub failures: BTreeMap<ModelId, String>,
    /// The patient was left out of this slice's report.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub partition: DataPartition,
    pub population_models: Vec<TrainedModel>,
    pub cells: Vec<CellSummary>,
    pub reports: Vec<EvalReport>,
}

struct PatientTest {
    series: GlucoseSeries,
    test: GlucoseSeries,
    windows: Vec<HistoryWindow>,
}

fn forecast_set(model: ModelId, patient: &str, windows: &[HistoryWindow], rows: Vec<Vec<f64>>) -> Result<ForecastSet> {
    let mut set = ForecastSet::new(model, patient);
    for (w, row) in windows.iter().zip(rows) {
        set.insert(w.origin_index, row)?;
    }
    Ok(set)
}

fn lstm_set(model: ModelId, models: &[TrainedModel], p: &PatientTest, max_abs: &mut BTreeMap<ModelId, f64>) -> Result<ForecastSet> {
    let inputs: Vec<Vec<f64>> = p.windows.iter().map(|w| w.values.clone()).collect();
    let rows = ensemble_forecast(models, &inputs, HORIZON_STEPS)?;
    let s = models[0].provenance.standardizer;
    let peak = rows.iter().flatten().fold(0.0f64, |m, v| m.max(s.standardize(*v).abs()));
    max_abs.insert(model, peak);
    forecast_set(model, &p.series.patient_id, &p.windows, rows)
}

/// Fit on the interpolated, standardized training slice and forecast from
/// each test window. Origins whose window is too short for the order are
/// skipped.
fn arima_set(train: &GlucoseSeries, p: &PatientTest, bounds: OrderBounds) -> Result<(ArimaModel, ForecastSet)> {
    let s = fit_standardizer(std::slice::from_ref(train))?;
    let values = train
        .interpolated()
        .ok_or_else(|| Error::InsufficientData(format!("patient {} training slice is empty", train.patient_id)))?;
    let z: Vec<f64> = values.iter().map(|v| s.standardize(*v)).collect();
    let (model, _) = auto_arima(&z, bounds)?;
    let mut set = ForecastSet::new(ModelId::PatientArima, &p.series.patient_id);
    for w in &p.windows {
        let history: Vec<f64> = w.values.iter().map(|v| s.standardize(*v)).collect();
        if let Ok(f) = forecast(&model, &history, HORIZON_STEPS) {
            set.insert(w.origin_index, f.into_iter().map(|v| s.destandardize(v)).collect())?;
        }
    }
    Ok((model, set))
}

/// Run every model for one patient and slice length and score them.
fn run_cell(
    p: &PatientTest,
    train_days: usize,
    shared: &[ForecastSet],
    population: &[TrainedModel],
    config: &ExperimentConfig,
) -> Result<(CellSummary, Vec<PatientMetric>)> {
    let pid = p.series.patient_id.clone();
    let (train, _) = split_patient_period(&p.series, train_days)?;
    let mut summary = CellSummary {
        patient_id: pid.clone(),
        train_days,
        test_windows: p.windows.len(),
        arima: None,
        finetuned: Vec::new(),
        scratch: Vec::new(),
        max_abs_standardized: BTreeMap::new(),
        failures: BTreeMap::new(),
        excluded: false,
    };
    let mut sets: Vec<ForecastSet> = shared.to_vec();

    if !config.skip_pretrained {
        let finetuned: Result<Vec<TrainedModel>> = population.iter().map(|m| finetune_patient(m, &train, &config.finetune)).collect();
        match finetuned.and_then(|ms| {
            summary.finetuned = ms.iter().map(|m| m.provenance.clone()).collect();
            lstm_set(ModelId::FinetunedLstm, &ms, p, &mut summary.max_abs_standardized)
        }) {
            Ok(set) => sets.push(set),
            Err(e) => {
                summary.failures.insert(ModelId::FinetunedLstm, e.to_string());
            }
        }
    }
    match train_patient_scratch(&train, &config.scratch).and_then(|ms| {
        summary.scratch = ms.iter().map(|m| m.provenance.clone()).collect();
        lstm_set(ModelId::PatientLstm, &ms, p, &mut summary.max_abs_standardized)
    }) {
        Ok(set) => sets.push(set),
        Err(e) => {
            summary.failures.insert(ModelId::PatientLstm, e.to_string());
        }
    }
    match arima_set(&train, p, config.arima_bounds) {
        Ok((model, set)) => {
            summary.arima = Some(model);
            sets.push(set);
        }
        Err(e) => {
            summary.failures.insert(ModelId::PatientArima, e.to_string());
        }
    }

    if !summary.failures.is_empty() {
        summary.excluded = true;
        return Ok((summary, Vec::new()));
    }
    match score_patient(&sets, &p.test) {
        Ok(metrics) => Ok((summary, metrics)),
        Err(e) => {
            summary.failures.insert(ModelId::Locf, format!("scoring: {e}"));
            summary.excluded = true;
            Ok((summary, Vec::new()))
        }
    }
}

/// Run the experiment over a cohort that already passed inclusion. Work
/// is spread over the current rayon pool; results are collected in
/// (patient, train_days) order so the output does not depend on the
/// number of workers.
pub fn run_experiment(cohort: &[GlucoseSeries], config: &ExperimentConfig, pretrained: Option<Vec<TrainedModel>>) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut ids: Vec<String> = cohort.iter().map(|s| s.patient_id.clone()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != cohort.len() {
        return Err(Error::InvalidArgument("duplicate patient ids in cohort".into()));
    }
    let partition = partition_population(&ids, config.partition_seed)?;
    let by_id = |set: &[String]| -> Vec<GlucoseSeries> { set.iter().filter_map(|id| cohort.iter().find(|s| &s.patient_id == id).cloned()).collect() };

    let population_models = if config.skip_pretrained {
        Vec::new()
    } else {
        match pretrained {
            Some(models) if !models.is_empty() => models,
            Some(_) => return Err(Error::InvalidArgument("empty pretrained model list".into())),
            None => train_population(&by_id(&partition.population_train), &config.population)?,
        }
    };
    if population_models.iter().any(|m| m.params.arch != config.population.architecture) {
        return Err(Error::ShapeMismatch("pretrained models do not match the configured architecture".into()));
    }

    let k = config.window();
    let patients: Vec<PatientTest> = by_id(&partition.heldout)
        .into_iter()
        .map(|series| {
            let (_, test) = split_patient_period(&series, config.train_days[0])?;
            let windows = extract_windows(&test, k, config.eval_stride, WindowMode::Test)?;
            Ok(PatientTest { series, test, windows })
        })
        .collect::<Result<_>>()?;

    // Forecasts that do not depend on the training slice.
    let shared: Vec<Vec<ForecastSet>> = patients
        .par_iter()
        .map(|p| {
            let pid = &p.series.patient_id;
            let mut sets = Vec::new();
            let rows = p.windows.iter().map(|w| locf_forecast(w, HORIZON_STEPS)).collect();
            sets.push(forecast_set(ModelId::Locf, pid, &p.windows, rows)?);
            if !config.skip_pretrained {
                let mut unused = BTreeMap::new();
                sets.push(lstm_set(ModelId::PopulationLstm, &population_models, p, &mut unused)?);
            }
            Ok(sets)
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..patients.len()).flat_map(|i| config.train_days.iter().map(move |&d| (i, d))).collect();
    let results: Vec<(CellSummary, Vec<PatientMetric>)> = cells
        .par_iter()
        .map(|&(i, d)| run_cell(&patients[i], d, &shared[i], &population_models, config))
        .collect::<Result<_>>()?;

    for model in config.models() {
        if !patients.is_empty() && results.iter().all(|(c, _)| c.failures.contains_key(&model)) {
            let reasons: Vec<String> = results.iter().filter_map(|(c, _)| c.failures.get(&model).map(|e| format!("{}/{}d: {e}", c.patient_id, c.train_days))).collect();
            return Err(Error::AllCandidatesFailed(format!("{model} failed for every patient: {}", reasons.join("; "))));
        }
    }

    let mut reports = Vec::new();
    for &d in &config.train_days {
        let metrics: Vec<PatientMetric> = results.iter().filter(|(c, _)| c.train_days == d).flat_map(|(_, m)| m.iter().cloned()).collect();
        let mut metrics = metrics;
        metrics.sort_by(|a, b| (a.model, &a.patient_id, a.j).cmp(&(b.model, &b.patient_id, b.j)));
        reports.push(EvalReport::from_metrics(d, metrics));
    }
    Ok(ExperimentOutput { partition, population_models, cells: results.into_iter().map(|(c, _)| c).collect(), reports })
}

/// Run inside a dedicated pool of `jobs` workers.
pub fn run_experiment_with_jobs(cohort: &[GlucoseSeries], config: &ExperimentConfig, pretrained: Option<Vec<TrainedModel>>, jobs: usize) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(cohort, config, pretrained))
}

/// File names of the report tables for one slice length.
pub fn report_file_names(train_days: usize) -> (String, String) {
    (format!("patients_{train_days}d.csv"), format!("population_{train_days}d.csv"))
}

pub const BOXPLOT_FILE: &str = "boxplot.csv";

/// Write report tables, the boxplot table, the JSON report, the partition
/// and per-cell summaries into `dir`.
pub fn write_outputs(dir: &Path, output: &ExperimentOutput) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        fs::write(dir.join(&name), bytes)?;
        written.push(name);
        Ok(())
    };
    for r in &output.reports {
        let (patients, population) = report_file_names(r.train_days);
        put(patients, patient_csv(r).as_bytes())?;
        put(population, population_csv(r).as_bytes())?;
    }
    put(BOXPLOT_FILE.into(), boxplot_csv(&output.reports).as_bytes())?;
    put("report.json".into(), &serde_json::to_vec_pretty(&output.reports)?)?;
    put("partition.json".into(), &serde_json::to_vec_pretty(&output.partition)?)?;
    put("cells.json".into(), &serde_json::to_vec_pretty(&output.cells)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm_net::Architecture;
    use crate::synth::{make_cohort, SynthProfile};

    fn tiny_config() -> ExperimentConfig {
        let arch = Architecture { layers: 1, hidden: 4, mlp_hidden: 4, window: 12, dropout: 0.0 };
        let t = |c: TrainConfig| TrainConfig {
            architecture: arch,
            max_epochs: 2,
            seeds: vec![0, 1],
            batch_size: 32,
            max_windows_per_epoch: Some(64),
            max_validation_windows: Some(64),
            ..c
        };
        ExperimentConfig {
            population: t(TrainConfig::population()),
            finetune: t(TrainConfig::finetune()),
            scratch: t(TrainConfig::scratch()),
            arima_bounds: OrderBounds { max_p: 3, max_d: 2, max_q: 3 },
            eval_stride: 12,
            ..ExperimentConfig::default()
        }
    }

    fn cohort() -> Vec<GlucoseSeries> {
        make_cohort(7, &SynthProfile::default(), 4).unwrap()
    }

    #[test]
    fn small_experiment_is_complete_and_job_independent() {
        let config = tiny_config();
        let one = run_experiment_with_jobs(&cohort(), &config, None, 1).unwrap();
        assert_eq!(one.partition.heldout.len(), 2);
        assert_eq!(one.cells.len(), 2 * 3);
        assert_eq!(one.reports.len(), 3);
        for r in &one.reports {
            for m in ModelId::ALL {
                for j in [3, 6, 9, 12, 18] {
                    assert!(r.population_row(m, j).is_some(), "{m} j={j} at {}d", r.train_days);
                }
            }
        }
        let two = run_experiment_with_jobs(&cohort(), &config, None, 2).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn skip_pretrained_limits_models() {
        let config = ExperimentConfig { skip_pretrained: true, train_days: vec![7], ..tiny_config() };
        let out = run_experiment(&cohort(), &config, None).unwrap();
        assert!(out.population_models.is_empty());
        assert_eq!(out.reports.len(), 1);
        assert!(out.reports[0].population.iter().all(|r| !matches!(r.model, ModelId::PopulationLstm | ModelId::FinetunedLstm)));
        assert!(out.reports[0].population_row(ModelId::PatientArima, 12).is_some());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.train_days = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.finetune.architecture.hidden = 8;
        assert!(c.validate().is_err());
        let toml_like = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&toml_like).unwrap(), ExperimentConfig::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
