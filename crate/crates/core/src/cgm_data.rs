//! CGM ingestion, grid alignment, inclusion filtering, standardization and
//! history-window extraction.
//!
//! Every series lives on a rigid 5-minute grid anchored at midnight UTC.
//! Missing readings are explicit `None` slots; nothing downstream ever sees
//! an irregular timestamp.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOT_MINUTES: i64 = 5;
pub const SLOT_SECONDS: i64 = SLOT_MINUTES * 60;
pub const SLOTS_PER_DAY: usize = 288;

/// Slots making up the "last hour" of a test window.
pub const RECENT_SLOTS: usize = 12;
/// Maximum number of missing slots tolerated within the last hour.
pub const MAX_RECENT_MISSING: usize = 4;

pub const CSV_HEADER: [&str; 3] = ["patient_id", "timestamp", "glucose_mmol_l"];

/// One patient's glucose readings on the 5-minute grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSeries {
    pub patient_id: String,
    pub start_time: DateTime<Utc>,
    pub values: Vec<Option<f64>>,
}

impl GlucoseSeries {
    pub fn new(patient_id: impl Into<String>, start_time: DateTime<Utc>, values: Vec<Option<f64>>) -> Self {
        Self { patient_id: patient_id.into(), start_time, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of whole days covered (partial trailing days are not counted).
    pub fn days(&self) -> usize {
        self.values.len() / SLOTS_PER_DAY
    }

    pub fn slot_time(&self, index: usize) -> DateTime<Utc> {
        self.start_time + Duration::seconds(index as i64 * SLOT_SECONDS)
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn availability(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.present_count() as f64 / self.values.len() as f64
    }

    pub fn present_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    /// Contiguous sub-series of `n_days` whole days starting at `first_day`.
    pub fn day_range(&self, first_day: usize, n_days: usize) -> Result<GlucoseSeries> {
        let start = first_day * SLOTS_PER_DAY;
        let end = start + n_days * SLOTS_PER_DAY;
        if end > self.values.len() {
            return Err(Error::InsufficientData(format!(
                "days {first_day}..{} requested from a {}-day series",
                first_day + n_days,
                self.days()
            )));
        }
        Ok(GlucoseSeries {
            patient_id: self.patient_id.clone(),
            start_time: self.slot_time(start),
            values: self.values[start..end].to_vec(),
        })
    }

    /// Missing slots filled by linear interpolation, with leading and
    /// trailing gaps held at the nearest present value. `None` when the
    /// series has no present value at all.
    pub fn interpolated(&self) -> Option<Vec<f64>> {
        interpolate_gaps(&self.values)
    }
}

/// A row dropped during ingestion because its glucose value was unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRejection {
    pub row: usize,
    pub patient_id: String,
    pub value: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    /// One series per patient, ordered by patient id.
    pub series: Vec<GlucoseSeries>,
    pub rejected_rows: Vec<RowRejection>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    patient_id: String,
    timestamp: String,
    glucose_mmol_l: String,
}

/// Nearest grid slot (counted from the Unix epoch) for a timestamp.
/// Exact half-slot ties go to the earlier slot.
pub fn snap_to_slot(ts: DateTime<Utc>) -> i64 {
    let secs = ts.timestamp();
    let base = secs.div_euclid(SLOT_SECONDS);
    let rem_ns = secs.rem_euclid(SLOT_SECONDS) as i128 * 1_000_000_000 + ts.timestamp_subsec_nanos() as i128;
    let half_ns = SLOT_SECONDS as i128 * 500_000_000;
    if rem_ns > half_ns {
        base + 1
    } else {
        base
    }
}

fn slot_to_time(slot: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(slot * SLOT_SECONDS, 0).expect("grid slot within chrono range")
}

/// Parse the `patient_id,timestamp,glucose_mmol_l` CSV contract.
///
/// Readings are snapped to the nearest slot and duplicates within a slot are
/// averaged. Each series starts at midnight UTC of its first reading's day
/// and runs through the end of its last reading's day. A structurally broken
/// row rejects the whole file; a non-positive or non-finite glucose value
/// only rejects that row.
pub fn ingest_csv<R: Read>(source: R) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow { row: 1, reason: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::MalformedRow {
            row: 1,
            reason: format!("expected header {:?}, found {:?}", CSV_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut slots: BTreeMap<String, BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    let mut rejected_rows = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::MalformedRow { row, reason: e.to_string() }
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parsed: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::MalformedRow { row, reason: e.to_string() })?;
        if parsed.patient_id.is_empty() {
            return Err(Error::MalformedRow { row, reason: "empty patient_id".into() });
        }
        let ts = DateTime::parse_from_rfc3339(&parsed.timestamp)
            .map_err(|e| Error::MalformedRow { row, reason: format!("timestamp {:?}: {e}", parsed.timestamp) })?
            .with_timezone(&Utc);
        let value: f64 = parsed
            .glucose_mmol_l
            .parse()
            .map_err(|_| Error::MalformedRow { row, reason: format!("glucose {:?} is not a number", parsed.glucose_mmol_l) })?;
        if !(value.is_finite() && value > 0.0) {
            rejected_rows.push(RowRejection {
                row,
                patient_id: parsed.patient_id,
                value,
                reason: "glucose must be finite and strictly positive".into(),
            });
            continue;
        }
        let entry = slots.entry(parsed.patient_id).or_default().entry(snap_to_slot(ts)).or_insert((0.0, 0));
        entry.0 += value;
        entry.1 += 1;
    }

    let series = slots
        .into_iter()
        .map(|(patient_id, readings)| {
            let first = *readings.keys().next().expect("patient has at least one reading");
            let last = *readings.keys().next_back().expect("patient has at least one reading");
            let per_day = SLOTS_PER_DAY as i64;
            let start_slot = first.div_euclid(per_day) * per_day;
            let end_slot = (last.div_euclid(per_day) + 1) * per_day;
            let mut values = vec![None; (end_slot - start_slot) as usize];
            for (slot, (sum, count)) in readings {
                values[(slot - start_slot) as usize] = Some(sum / count as f64);
            }
            GlucoseSeries { patient_id, start_time: slot_to_time(start_slot), values }
        })
        .collect();

    Ok(Ingested { series, rejected_rows })
}

/// Render series back into the CSV contract, one row per present slot.
pub fn write_csv(series: &[GlucoseSeries]) -> String {
    let mut out = String::new();
    out.push_str(&CSV_HEADER.join(","));
    out.push('\n');
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                out.push_str(&format!("{},{},{}\n", s.patient_id, s.slot_time(i).format("%Y-%m-%dT%H:%M:%SZ"), v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectionReason {
    DayBelow70Pct,
    PeriodBelow70Pct,
}

impl RejectionReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectionReason::DayBelow70Pct => "DAY_BELOW_70PCT",
            RejectionReason::PeriodBelow70Pct => "PERIOD_BELOW_70PCT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub patient_id: String,
    /// Day index for day-level drops, `None` for a rejected period.
    pub day: Option<usize>,
    pub reason: RejectionReason,
    pub available: usize,
    pub total: usize,
}

impl RejectionEntry {
    pub fn render(&self) -> String {
        let day = self.day.map_or_else(|| "-".to_string(), |d| d.to_string());
        format!("{},{},{},{},{}", self.patient_id, day, self.reason.code(), self.available, self.total)
    }
}

#[derive(Debug, Clone)]
pub struct InclusionResult {
    /// `None` when the whole period was rejected.
    pub series: Option<GlucoseSeries>,
    pub report: Vec<RejectionEntry>,
}

/// `present / total > 70%`, evaluated in integers.
pub fn passes_availability(present: usize, total: usize) -> bool {
    total > 0 && 10 * present > 7 * total
}

/// Blank out days with at most 70% availability, then reject the period if
/// the remaining readings cover at most 70% of its slots.
///
/// Dropped days stay on the grid as all-missing slots so the slot/timestamp
/// correspondence survives.
pub fn apply_inclusion(series: GlucoseSeries) -> InclusionResult {
    let mut series = series;
    let mut report = Vec::new();
    for day in 0..series.days() {
        let range = day * SLOTS_PER_DAY..(day + 1) * SLOTS_PER_DAY;
        let present = series.values[range.clone()].iter().filter(|v| v.is_some()).count();
        if !passes_availability(present, SLOTS_PER_DAY) {
            report.push(RejectionEntry {
                patient_id: series.patient_id.clone(),
                day: Some(day),
                reason: RejectionReason::DayBelow70Pct,
                available: present,
                total: SLOTS_PER_DAY,
            });
            series.values[range].iter_mut().for_each(|v| *v = None);
        }
    }
    let present = series.present_count();
    if !passes_availability(present, series.len()) {
        report.push(RejectionEntry {
            patient_id: series.patient_id.clone(),
            day: None,
            reason: RejectionReason::PeriodBelow70Pct,
            available: present,
            total: series.len(),
        });
        return InclusionResult { series: None, report };
    }
    InclusionResult { series: Some(series), report }
}

pub fn render_rejection_report(entries: &[RejectionEntry]) -> String {
    entries.iter().map(|e| e.render() + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: f64,
    pub std: f64,
}

impl StandardizationParams {
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn standardize_series(&self, series: &GlucoseSeries) -> GlucoseSeries {
        GlucoseSeries {
            patient_id: series.patient_id.clone(),
            start_time: series.start_time,
            values: series.values.iter().map(|v| v.map(|x| self.standardize(x))).collect(),
        }
    }
}

/// Mean and population (divide-by-N) standard deviation of every present
/// value across the training series.
pub fn fit_standardizer(training: &[GlucoseSeries]) -> Result<StandardizationParams> {
    let n = training.iter().map(GlucoseSeries::present_count).sum::<usize>();
    if n < 2 {
        return Err(Error::InsufficientData(format!("standardizer needs at least 2 present values, got {n}")));
    }
    let mean = training.iter().flat_map(GlucoseSeries::present_values).sum::<f64>() / n as f64;
    let var = training.iter().flat_map(GlucoseSeries::present_values).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(StandardizationParams { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Fully present windows whose next slot (the teacher-forcing target) is
    /// also present.
    Train,
    /// Most recent slot present and at most 4 gaps in the last hour;
    /// remaining gaps interpolated.
    Test,
}

/// A k-slot slice of a series, in the units of the series it was cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub patient_id: String,
    pub values: Vec<f64>,
    /// Presence of each slot before interpolation.
    pub mask: Vec<bool>,
    /// Grid index of the slot immediately after the window.
    pub origin_index: usize,
    /// Value at `origin_index`, when present.
    pub target: Option<f64>,
}

impl HistoryWindow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last_value(&self) -> f64 {
        *self.values.last().expect("windows are non-empty")
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> HistoryWindow {
        HistoryWindow {
            values: self.values.iter().map(|&v| f(v)).collect(),
            target: self.target.map(&f),
            ..self.clone()
        }
    }
}

/// Test-mode validity rule on a window's presence mask.
pub fn test_window_valid(mask: &[bool]) -> bool {
    let Some(&last) = mask.last() else { return false };
    if !last {
        return false;
    }
    let recent = &mask[mask.len().saturating_sub(RECENT_SLOTS)..];
    recent.iter().filter(|present| !**present).count() <= MAX_RECENT_MISSING
}

/// Linear interpolation of interior gaps; edge gaps take the nearest
/// present value.
pub fn interpolate_gaps(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let present: Vec<(usize, f64)> = values.iter().enumerate().filter_map(|(i, v)| v.map(|x| (i, x))).collect();
    let (&(first_i, first_v), &(last_i, last_v)) = (present.first()?, present.last()?);
    let mut out = vec![0.0; values.len()];
    out[..=first_i].iter_mut().for_each(|o| *o = first_v);
    out[last_i..].iter_mut().for_each(|o| *o = last_v);
    for pair in present.windows(2) {
        let ((i0, v0), (i1, v1)) = (pair[0], pair[1]);
        let span = (i1 - i0) as f64;
        for (offset, slot) in out[i0..=i1].iter_mut().enumerate() {
            *slot = v0 + (v1 - v0) * offset as f64 / span;
        }
    }
    Some(out)
}

/// Cut k-slot windows every `step` slots.
pub fn extract_windows(series: &GlucoseSeries, k: usize, step: usize, mode: WindowMode) -> Result<Vec<HistoryWindow>> {
    if k == 0 || step == 0 {
        return Err(Error::InvalidArgument(format!("window length {k} and step {step} must both be at least 1")));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + k <= series.len() {
        let origin = start + k;
        let slice = &series.values[start..origin];
        let target = series.values.get(origin).copied().flatten();
        let mask: Vec<bool> = slice.iter().map(Option::is_some).collect();
        let window = match mode {
            WindowMode::Train if target.is_some() && mask.iter().all(|m| *m) => Some(HistoryWindow {
                patient_id: series.patient_id.clone(),
                values: slice.iter().map(|v| v.expect("checked present")).collect(),
                mask,
                origin_index: origin,
                target,
            }),
            WindowMode::Test if test_window_valid(&mask) => Some(HistoryWindow {
                patient_id: series.patient_id.clone(),
                values: interpolate_gaps(slice).expect("last slot is present"),
                mask,
                origin_index: origin,
                target,
            }),
            _ => None,
        };
        windows.extend(window);
        start += step;
    }
    Ok(windows)
}

/// Patients for population training versus held out for patient-level
/// models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPartition {
    pub population_train: Vec<String>,
    pub heldout: Vec<String>,
    /// Training-slice lengths evaluated for each held-out patient.
    pub train_days: Vec<usize>,
}

pub const TRAIN_DAY_OPTIONS: [usize; 3] = [1, 3, 7];
pub const TEST_DAYS: usize = 7;

/// Seeded split of ids into (kept, heldout) with
/// `heldout = round(n * num / den)`, clamped so both sides are non-empty.
pub fn proportional_split(ids: &[String], num: usize, den: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 patients to split, got {}", ids.len())));
    }
    let n = ids.len();
    let heldout_n = ((n * num) as f64 / den as f64).round().clamp(1.0, (n - 1) as f64) as usize;
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut heldout = shuffled.split_off(n - heldout_n);
    shuffled.sort();
    heldout.sort();
    Ok((shuffled, heldout))
}

/// 35:15 population/held-out split scaled to the cohort size.
pub fn partition_population(patients: &[String], seed: u64) -> Result<DataPartition> {
    let (population_train, heldout) = proportional_split(patients, 15, 50, seed)?;
    Ok(DataPartition { population_train, heldout, train_days: TRAIN_DAY_OPTIONS.to_vec() })
}

/// Final 7 days for testing, preceded by `train_days` contiguous training days.
pub fn split_patient_period(series: &GlucoseSeries, train_days: usize) -> Result<(GlucoseSeries, GlucoseSeries)> {
    if !(1..=TEST_DAYS).contains(&train_days) {
        return Err(Error::InvalidArgument(format!("train_days must be within 1..=7, got {train_days}")));
    }
    let days = series.days();
    if days < 2 * TEST_DAYS {
        return Err(Error::InsufficientData(format!("patient {} spans {days} days, need 14", series.patient_id)));
    }
    let test_start = days - TEST_DAYS;
    let train = series.day_range(test_start - train_days, train_days)?;
    let test = series.day_range(test_start, TEST_DAYS)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2021-01-04T00:00:00Z").unwrap().with_timezone(&Utc)
    }

    fn series(values: Vec<Option<f64>>) -> GlucoseSeries {
        GlucoseSeries::new("P", t0(), values)
    }

    #[test]
    fn ingest_counts_and_snapping() {
        let mut csv = String::from("patient_id,timestamp,glucose_mmol_l\n");
        for p in ["A", "B"] {
            for i in 0..288 {
                let ts = t0() + Duration::seconds(i * 300);
                csv.push_str(&format!("{p},{},6.0\n", ts.to_rfc3339()));
            }
        }
        let out = ingest_csv(csv.as_bytes()).unwrap();
        assert_eq!(out.series.len(), 2);
        assert!(out.series.iter().all(|s| s.len() == 288 && s.present_count() == 288));
    }

    #[test]
    fn tie_rounds_to_earlier_slot_and_duplicates_average() {
        let csv = "patient_id,timestamp,glucose_mmol_l\n\
                   A,2021-01-04T00:02:30Z,4.0\n\
                   A,2021-01-04T00:35:00Z,5.0\n\
                   A,2021-01-04T00:36:10+00:00,6.0\n\
                   A,2021-01-04T00:02:31Z,9.0\n";
        let s = &ingest_csv(csv.as_bytes()).unwrap().series[0];
        assert_eq!(s.values[0], Some(4.0));
        assert_eq!(s.values[1], Some(9.0));
        assert_eq!(s.values[7], Some(5.5));
        assert_eq!(s.len(), 288);
        assert_eq!(s.start_time, t0());
    }

    #[test]
    fn malformed_row_rejects_file_with_row_number() {
        let csv = "patient_id,timestamp,glucose_mmol_l\nA,2021-01-04T00:00:00Z,5.0\nA,not-a-time,5.0\n";
        match ingest_csv(csv.as_bytes()) {
            Err(Error::MalformedRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_positive_glucose_rejects_row_only() {
        let csv = "patient_id,timestamp,glucose_mmol_l\nA,2021-01-04T00:00:00Z,5.0\nA,2021-01-04T00:05:00Z,-1\n";
        let out = ingest_csv(csv.as_bytes()).unwrap();
        assert_eq!(out.rejected_rows.len(), 1);
        assert_eq!(out.rejected_rows[0].row, 3);
        assert_eq!(out.series[0].present_count(), 1);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(matches!(ingest_csv("id,ts,bg\n".as_bytes()), Err(Error::MalformedRow { row: 1, .. })));
    }

    fn day_with_present(n: usize) -> Vec<Option<f64>> {
        (0..SLOTS_PER_DAY).map(|i| (i < n).then_some(6.0)).collect()
    }

    #[test]
    fn day_availability_threshold_is_strict() {
        assert!(passes_availability(202, 288));
        assert!(!passes_availability(201, 288));

        let mut values = day_with_present(202);
        values.extend(day_with_present(201));
        for _ in 0..4 {
            values.extend(day_with_present(288));
        }
        let out = apply_inclusion(series(values));
        let kept = out.series.unwrap();
        assert_eq!(kept.values[..288].iter().filter(|v| v.is_some()).count(), 202);
        assert!(kept.values[288..576].iter().all(Option::is_none));
        assert_eq!(out.report.len(), 1);
        assert_eq!(out.report[0].day, Some(1));
        assert_eq!(out.report[0].reason.code(), "DAY_BELOW_70PCT");
    }

    #[test]
    fn full_period_kept_unchanged_and_sparse_period_rejected() {
        let full = series(vec![Some(6.0); 14 * SLOTS_PER_DAY]);
        let out = apply_inclusion(full.clone());
        assert_eq!(out.series, Some(full));
        assert!(out.report.is_empty());

        let mut values = Vec::new();
        for d in 0..14 {
            values.extend(day_with_present(if d < 9 { 288 } else { 0 }));
        }
        let out = apply_inclusion(series(values));
        assert!(out.series.is_none());
        assert_eq!(out.report.last().unwrap().reason, RejectionReason::PeriodBelow70Pct);
        assert_eq!(out.report.len(), 6);
    }

    #[test]
    fn standardizer_population_std() {
        let s = series(vec![Some(4.0), None, Some(6.0), Some(8.0)]);
        let p = fit_standardizer(&[s.clone()]).unwrap();
        assert_eq!(p.mean, 6.0);
        assert!((p.std - 1.632993161855452).abs() < 1e-12);
        assert_eq!(p.standardize(p.mean), 0.0);
        assert!((p.standardize(p.mean + p.std) - 1.0).abs() < 1e-15);
        let z = p.standardize_series(&s);
        assert_eq!(z.values[1], None);
        for (orig, zv) in s.values.iter().zip(&z.values) {
            if let (Some(o), Some(zv)) = (orig, zv) {
                assert!((p.destandardize(*zv) - o).abs() <= 1e-12 * o);
            }
        }
    }

    #[test]
    fn standardizer_errors() {
        assert!(matches!(fit_standardizer(&[series(vec![None; 5])]), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_standardizer(&[series(vec![Some(5.0); 5])]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn interpolation_interior_and_leading() {
        let mut values = vec![Some(1.0); 24];
        values[2] = Some(5.0);
        values[3] = None;
        values[4] = None;
        values[5] = Some(6.5);
        let w = &extract_windows(&series(values), 24, 1, WindowMode::Test).unwrap()[0];
        assert_eq!(w.values[3], 5.5);
        assert_eq!(w.values[4], 6.0);
        assert_eq!(w.mask.iter().filter(|m| !**m).count(), 2);

        let lead = interpolate_gaps(&[None, None, Some(3.0), None, Some(5.0)]).unwrap();
        assert_eq!(lead, vec![3.0, 3.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn test_mode_rules() {
        let mut five_recent = vec![Some(6.0); 24];
        for i in [13, 15, 17, 19, 21] {
            five_recent[i] = None;
        }
        assert!(extract_windows(&series(five_recent.clone()), 24, 1, WindowMode::Test).unwrap().is_empty());
        five_recent[21] = Some(6.0);
        assert_eq!(extract_windows(&series(five_recent), 24, 1, WindowMode::Test).unwrap().len(), 1);

        let mut last_missing = vec![Some(6.0); 24];
        last_missing[23] = None;
        assert!(extract_windows(&series(last_missing), 24, 1, WindowMode::Test).unwrap().is_empty());
    }

    #[test]
    fn train_mode_requires_full_window_and_target() {
        let mut values = vec![Some(6.0); 30];
        values[27] = None;
        let ws = extract_windows(&series(values), 24, 1, WindowMode::Train).unwrap();
        // origins 24..=29 exist; the gap at 27 kills origins 27 (as target) through 29.
        let origins: Vec<usize> = ws.iter().map(|w| w.origin_index).collect();
        assert_eq!(origins, vec![24, 25, 26]);
        assert!(ws.iter().all(|w| w.mask.iter().all(|m| *m) && w.target.is_some()));
    }

    #[test]
    fn window_length_longer_than_series_is_empty() {
        assert!(extract_windows(&series(vec![Some(5.0); 10]), 24, 1, WindowMode::Test).unwrap().is_empty());
        assert!(extract_windows(&series(vec![Some(5.0); 10]), 0, 1, WindowMode::Test).is_err());
    }

    #[test]
    fn step_controls_stride() {
        let ws = extract_windows(&series(vec![Some(5.0); 24 + 40]), 24, 4, WindowMode::Train).unwrap();
        assert_eq!(ws.len(), 10);
        assert!(ws.windows(2).all(|p| p[1].origin_index - p[0].origin_index == 4));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:03}")).collect()
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let p = partition_population(&ids(50), 0).unwrap();
        assert_eq!((p.population_train.len(), p.heldout.len()), (35, 15));
        assert_eq!(p, partition_population(&ids(50), 0).unwrap());
        assert_ne!(p, partition_population(&ids(50), 1).unwrap());
        let small = partition_population(&ids(10), 3).unwrap();
        assert_eq!((small.population_train.len(), small.heldout.len()), (7, 3));
        assert!(small.heldout.iter().all(|h| !small.population_train.contains(h)));
        assert!(partition_population(&ids(1), 0).is_err());
        let two = partition_population(&ids(2), 0).unwrap();
        assert_eq!((two.population_train.len(), two.heldout.len()), (1, 1));
    }

    #[test]
    fn patient_period_split() {
        let values: Vec<Option<f64>> = (0..14 * SLOTS_PER_DAY).map(|i| Some((i / SLOTS_PER_DAY) as f64 + 1.0)).collect();
        let s = series(values);
        let (train, test) = split_patient_period(&s, 7).unwrap();
        assert_eq!(train.values.first(), Some(&Some(1.0)));
        assert_eq!(train.values.last(), Some(&Some(7.0)));
        assert_eq!(test.values.first(), Some(&Some(8.0)));
        assert_eq!(test.days(), 7);
        let (train, _) = split_patient_period(&s, 1).unwrap();
        assert_eq!(train.days(), 1);
        assert!(train.present_values().all(|v| v == 7.0));
        assert_eq!(train.start_time + Duration::days(1), test.start_time);
        let (train, _) = split_patient_period(&s, 3).unwrap();
        assert_eq!(train.values.first(), Some(&Some(5.0)));
        assert!(split_patient_period(&s.day_range(0, 13).unwrap(), 7).is_err());
    }
}
