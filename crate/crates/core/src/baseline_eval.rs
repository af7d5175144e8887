//! LOCF baseline, cross-model origin alignment and per-horizon MAE/RMSE
//! with population means and standard errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cgm_data::{GlucoseSeries, HistoryWindow, SLOT_MINUTES};
use crate::error::{Error, Result};

/// Forecast length: 18 steps of 5 minutes.
pub const HORIZON_STEPS: usize = 18;
/// Horizon indices for 15, 30, 45, 60 and 90 minutes.
pub const REPORTED_HORIZONS: [usize; 5] = [3, 6, 9, 12, 18];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    PopulationLstm,
    FinetunedLstm,
    PatientLstm,
    PatientArima,
    Locf,
}

impl ModelId {
    pub const ALL: [ModelId; 5] = [ModelId::PopulationLstm, ModelId::FinetunedLstm, ModelId::PatientLstm, ModelId::PatientArima, ModelId::Locf];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::PopulationLstm => "population_lstm",
            ModelId::FinetunedLstm => "finetuned_lstm",
            ModelId::PatientLstm => "patient_lstm",
            ModelId::PatientArima => "patient_arima",
            ModelId::Locf => "locf",
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn horizon_minutes(j: usize) -> usize {
    j * SLOT_MINUTES as usize
}

/// Repeat the most recent value of the window.
pub fn locf_forecast(window: &HistoryWindow, steps: usize) -> Vec<f64> {
    vec![window.last_value(); steps]
}

/// One model's forecasts for one patient, keyed by origin (grid index in
/// the patient's test series), in mmol/L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub model: ModelId,
    pub patient_id: String,
    pub forecasts: BTreeMap<usize, Vec<f64>>,
}

impl ForecastSet {
    pub fn new(model: ModelId, patient_id: impl Into<String>) -> Self {
        Self { model, patient_id: patient_id.into(), forecasts: BTreeMap::new() }
    }

    pub fn insert(&mut self, origin: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != HORIZON_STEPS {
            return Err(Error::ShapeMismatch(format!("{} forecast has {} values at origin {origin}", self.model, values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} forecast value {v} at origin {origin}", self.model)));
        }
        self.forecasts.insert(origin, values);
        Ok(())
    }
}

/// Origins shared by every model and, per horizon, those whose ground
/// truth is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub common: Vec<usize>,
    /// Entry `j - 1` lists the origins scored at horizon `j`.
    pub per_horizon: Vec<Vec<usize>>,
}

/// Truth for origin `o` at horizon `j` is slot `o + j - 1` of `truth`.
pub fn truth_at(truth: &GlucoseSeries, origin: usize, j: usize) -> Option<f64> {
    truth.values.get(origin + j - 1).copied().flatten()
}

pub fn align_origins(sets: &[ForecastSet], truth: &GlucoseSeries) -> Result<Alignment> {
    let Some(first) = sets.first() else {
        return Err(Error::InvalidArgument("alignment needs at least one model".into()));
    };
    let mut common: BTreeSet<usize> = first.forecasts.keys().copied().collect();
    for s in &sets[1..] {
        common.retain(|o| s.forecasts.contains_key(o));
    }
    if common.is_empty() {
        let counts: Vec<String> = sets.iter().map(|s| format!("{}={}", s.model, s.forecasts.len())).collect();
        return Err(Error::EmptyAlignment(format!("patient {}: {}", truth.patient_id, counts.join(", "))));
    }
    let common: Vec<usize> = common.into_iter().collect();
    let per_horizon = (1..=HORIZON_STEPS)
        .map(|j| common.iter().copied().filter(|&o| truth_at(truth, o, j).is_some()).collect())
        .collect();
    Ok(Alignment { common, per_horizon })
}

pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(predictions, truths)?;
    Ok(predictions.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(predictions, truths)?;
    Ok((predictions.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64).sqrt())
}

fn check_pairs(predictions: &[f64], truths: &[f64]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} truths", predictions.len(), truths.len())));
    }
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no aligned pairs".into()));
    }
    Ok(())
}

fn horizon_pairs(set: &ForecastSet, truth: &GlucoseSeries, alignment: &Alignment, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=HORIZON_STEPS).contains(&j) {
        return Err(Error::InvalidArgument(format!("horizon index {j} outside 1..=18")));
    }
    let origins = &alignment.per_horizon[j - 1];
    let preds = origins.iter().map(|o| set.forecasts[o][j - 1]).collect();
    let truths = origins.iter().map(|&o| truth_at(truth, o, j).expect("aligned truth")).collect();
    Ok((preds, truths))
}

pub fn mae_per_horizon(set: &ForecastSet, truth: &GlucoseSeries, alignment: &Alignment, j: usize) -> Result<f64> {
    let (p, t) = horizon_pairs(set, truth, alignment, j)?;
    mae(&p, &t)
}

pub fn rmse_per_horizon(set: &ForecastSet, truth: &GlucoseSeries, alignment: &Alignment, j: usize) -> Result<f64> {
    let (p, t) = horizon_pairs(set, truth, alignment, j)?;
    rmse(&p, &t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetric {
    pub model: ModelId,
    pub patient_id: String,
    pub j: usize,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Align all models of one patient and score every horizon 1..=18.
/// Horizons without any present truth are skipped.
pub fn score_patient(sets: &[ForecastSet], truth: &GlucoseSeries) -> Result<Vec<PatientMetric>> {
    let alignment = align_origins(sets, truth)?;
    let mut out = Vec::new();
    let mut ordered: Vec<&ForecastSet> = sets.iter().collect();
    ordered.sort_by_key(|s| s.model);
    for set in ordered {
        for j in 1..=HORIZON_STEPS {
            let (p, t) = horizon_pairs(set, truth, &alignment, j)?;
            if p.is_empty() {
                continue;
            }
            out.push(PatientMetric { model: set.model, patient_id: truth.patient_id.clone(), j, n: p.len(), mae: mae(&p, &t)?, rmse: rmse(&p, &t)? });
        }
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation over sqrt(n); undefined below two values.
pub fn sem(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub model: ModelId,
    pub j: usize,
    pub patients: usize,
    pub mean_mae: f64,
    pub sem_mae: Option<f64>,
    pub mean_rmse: f64,
    pub sem_rmse: Option<f64>,
}

/// Mean over patients of the per-patient metrics, per (model, j).
pub fn aggregate_population(metrics: &[PatientMetric]) -> Vec<PopulationRow> {
    let mut groups: BTreeMap<(ModelId, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for m in metrics {
        let g = groups.entry((m.model, m.j)).or_default();
        g.0.push(m.mae);
        g.1.push(m.rmse);
    }
    groups
        .into_iter()
        .map(|((model, j), (maes, rmses))| PopulationRow {
            model,
            j,
            patients: maes.len(),
            mean_mae: mean(&maes),
            sem_mae: sem(&maes),
            mean_rmse: mean(&rmses),
            sem_rmse: sem(&rmses),
        })
        .collect()
}

/// Scores of every model for one training-slice length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_days: usize,
    pub patient_metrics: Vec<PatientMetric>,
    pub population: Vec<PopulationRow>,
}

impl EvalReport {
    pub fn from_metrics(train_days: usize, patient_metrics: Vec<PatientMetric>) -> Self {
        let population = aggregate_population(&patient_metrics);
        Self { train_days, patient_metrics, population }
    }

    pub fn population_row(&self, model: ModelId, j: usize) -> Option<&PopulationRow> {
        self.population.iter().find(|r| r.model == model && r.j == j)
    }

    pub fn patient_mae(&self, model: ModelId, patient_id: &str, j: usize) -> Option<f64> {
        self.patient_metrics.iter().find(|m| m.model == model && m.patient_id == patient_id && m.j == j).map(|m| m.mae)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const PATIENT_CSV_HEADER: &str = "model,patient_id,horizon_min,j,n,mae,rmse";
pub const POPULATION_CSV_HEADER: &str = "model,horizon_min,mean_mae,sem_mae,mean_rmse,sem_rmse";
pub const BOXPLOT_CSV_HEADER: &str = "model,train_days,horizon_min,patient_id,mae";

/// Every (model, patient, j) cell.
pub fn patient_csv(report: &EvalReport) -> String {
    let mut out = format!("{PATIENT_CSV_HEADER}\n");
    for m in &report.patient_metrics {
        writeln!(out, "{},{},{},{},{},{},{}", m.model, m.patient_id, horizon_minutes(m.j), m.j, m.n, m.mae, m.rmse).expect("write to String");
    }
    out
}

/// Population rows at the reported horizons; an undefined SEM is empty.
pub fn population_csv(report: &EvalReport) -> String {
    let mut out = format!("{POPULATION_CSV_HEADER}\n");
    for r in report.population.iter().filter(|r| REPORTED_HORIZONS.contains(&r.j)) {
        writeln!(out, "{},{},{},{},{},{}", r.model, horizon_minutes(r.j), r.mean_mae, opt(r.sem_mae), r.mean_rmse, opt(r.sem_rmse)).expect("write to String");
    }
    out
}

/// Raw per-patient MAE at the reported horizons across training-slice
/// lengths, for recomputing quartiles downstream.
pub fn boxplot_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{BOXPLOT_CSV_HEADER}\n");
    for report in reports {
        for m in report.patient_metrics.iter().filter(|m| REPORTED_HORIZONS.contains(&m.j)) {
            writeln!(out, "{},{},{},{},{}", m.model, report.train_days, horizon_minutes(m.j), m.patient_id, m.mae).expect("write to String");
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// CSV concatenates the patient table and the population table with a
/// blank line between them; JSON is the whole report.
pub fn export_report(report: &EvalReport, format: ExportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ExportFormat::Csv => format!("{}\n{}", patient_csv(report), population_csv(report)).into_bytes(),
        ExportFormat::Json => serde_json::to_vec_pretty(report)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::{forecast, ArimaModel, ArimaOrder};
    use crate::synth::{synth_start, GaussianStream};
    use proptest::prelude::*;

    fn window(values: Vec<f64>) -> HistoryWindow {
        HistoryWindow { patient_id: "P".into(), mask: vec![true; values.len()], values, origin_index: 24, target: None }
    }

    fn truth(values: Vec<Option<f64>>) -> GlucoseSeries {
        GlucoseSeries::new("P", synth_start(), values)
    }

    fn set(model: ModelId, origins: &[usize], value: f64) -> ForecastSet {
        let mut s = ForecastSet::new(model, "P");
        for &o in origins {
            s.insert(o, vec![value; HORIZON_STEPS]).unwrap();
        }
        s
    }

    #[test]
    fn locf_examples() {
        let w = window(vec![4.0, 9.0, 5.5]);
        assert_eq!(locf_forecast(&w, 18), vec![5.5; 18]);
        assert_eq!(locf_forecast(&window(vec![1.0, -3.0, 5.5]), 18), vec![5.5; 18]);
        let rw = ArimaModel { order: ArimaOrder { p: 0, d: 1, q: 0 }, c: 0.0, phi: vec![], theta: vec![], sigma2: 1.0, aic: 0.0, n_fit: 10 };
        assert_eq!(forecast(&rw, &w.values, 18).unwrap(), locf_forecast(&w, 18));
    }

    #[test]
    fn alignment_examples() {
        let t = truth(vec![Some(5.0); 60]);
        let a = set(ModelId::PatientArima, &[10, 20], 5.0);
        let b = set(ModelId::Locf, &[20, 30], 5.0);
        assert_eq!(align_origins(&[a.clone(), b.clone()], &t).unwrap().common, vec![20]);
        assert_eq!(align_origins(&[a.clone()], &t).unwrap().common, vec![10, 20]);
        let c = set(ModelId::Locf, &[30], 5.0);
        let err = align_origins(&[a.clone(), c], &t).unwrap_err().to_string();
        assert!(err.contains("patient_arima=2") && err.contains("locf=1"), "{err}");

        let mut values = vec![Some(5.0); 60];
        values[22] = None; // origin 20, j = 3
        let al = align_origins(&[a], &truth(values)).unwrap();
        assert_eq!(al.per_horizon[2], vec![10]);
        assert_eq!(al.per_horizon[1], vec![10, 20]);
        assert_eq!(al.per_horizon[3], vec![10, 20]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[5.0, 6.0], &[4.0, 8.0]).unwrap(), 1.5);
        assert!((rmse(&[5.0, 6.0], &[4.0, 8.0]).unwrap() - 1.5811388300841898).abs() < 1e-15);
        assert_eq!(mae(&[3.0, 2.0], &[3.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 2.0], &[3.0, 2.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn sem_examples() {
        assert!((sem(&[1.0, 2.0, 3.0]).unwrap() - 0.5773502691896258).abs() < 1e-15);
        assert_eq!(sem(&[2.0, 2.0, 2.0]), Some(0.0));
        assert_eq!(sem(&[2.0]), None);
    }

    fn sample_report() -> EvalReport {
        let t = truth((0..100).map(|i| Some(5.0 + 0.01 * i as f64)).collect());
        let mut metrics = Vec::new();
        for pid in ["A", "B"] {
            let mut t = t.clone();
            t.patient_id = pid.into();
            let sets: Vec<ForecastSet> = ModelId::ALL
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let mut s = set(*m, &[24, 40, 60], 5.0 + 0.1 * i as f64);
                    s.patient_id = pid.into();
                    s
                })
                .collect();
            metrics.extend(score_patient(&sets, &t).unwrap());
        }
        EvalReport::from_metrics(7, metrics)
    }

    #[test]
    fn report_shapes_and_alignment_fairness() {
        let r = sample_report();
        let pop = population_csv(&r);
        assert_eq!(pop.lines().count(), 1 + 25);
        assert_eq!(pop.lines().next().unwrap(), POPULATION_CSV_HEADER);
        assert_eq!(patient_csv(&r).lines().count(), 1 + 2 * 5 * 18);
        assert_eq!(boxplot_csv(&[r.clone(), r.clone()]).lines().count(), 1 + 2 * 2 * 5 * 5);
        for j in 1..=18 {
            let ns: BTreeSet<usize> = r.patient_metrics.iter().filter(|m| m.j == j && m.patient_id == "A").map(|m| m.n).collect();
            assert_eq!(ns.len(), 1);
        }
        assert_eq!(export_report(&r, ExportFormat::Csv).unwrap(), export_report(&r, ExportFormat::Csv).unwrap());
        let json = export_report(&r, ExportFormat::Json).unwrap();
        assert_eq!(serde_json::from_slice::<EvalReport>(&json).unwrap(), r);
        assert!(r.population.iter().all(|row| row.mean_rmse >= row.mean_mae));
    }

    #[test]
    fn single_patient_has_no_sem() {
        let mut r = sample_report();
        r.patient_metrics.retain(|m| m.patient_id == "A");
        let r = EvalReport::from_metrics(1, r.patient_metrics);
        assert!(r.population.iter().all(|row| row.sem_mae.is_none()));
        assert!(population_csv(&r).lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn per_horizon_matches_direct_loop() {
        let mut rng = GaussianStream::new(9);
        let t = truth((0..80).map(|i| (i % 7 != 3).then(|| 6.0 + rng.next_gaussian())).collect());
        let mut s = ForecastSet::new(ModelId::PatientLstm, "P");
        for o in (24..60).step_by(2) {
            s.insert(o, (0..18).map(|_| 6.0 + rng.next_gaussian()).collect()).unwrap();
        }
        let al = align_origins(std::slice::from_ref(&s), &t).unwrap();
        for j in 1..=18 {
            let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
            for (o, f) in &s.forecasts {
                if let Some(v) = t.values.get(o + j - 1).copied().flatten() {
                    abs += (f[j - 1] - v).abs();
                    sq += (f[j - 1] - v).powi(2);
                    n += 1;
                }
            }
            let m = mae_per_horizon(&s, &t, &al, j).unwrap();
            let r = rmse_per_horizon(&s, &t, &al, j).unwrap();
            assert!((m - abs / n as f64).abs() <= 1e-12 * m);
            assert!((r - (sq / n as f64).sqrt()).abs() <= 1e-12 * r);
        }
    }

    #[test]
    fn forecast_set_validates_length() {
        let mut s = ForecastSet::new(ModelId::Locf, "P");
        assert!(s.insert(0, vec![1.0; 17]).is_err());
        assert!(s.insert(0, vec![f64::NAN; 18]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() * (1.0 - 1e-15));
        }
    }
}
