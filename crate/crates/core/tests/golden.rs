//! Regression against a committed synthetic cohort.

use bgcast::cgm_data::{apply_inclusion, fit_standardizer, ingest_csv, write_csv};
use bgcast::synth::{make_cohort, SynthProfile};

const GOLDEN: &str = include_str!("golden/cohort_seed11.csv");

fn template() -> SynthProfile {
    SynthProfile { days: 2, ..SynthProfile::default() }
}

#[test]
fn generator_output_is_unchanged() {
    let cohort = make_cohort(2, &template(), 11).unwrap();
    assert_eq!(write_csv(&cohort), GOLDEN);
}

#[test]
fn ingest_round_trips_the_golden_file() {
    let ingested = ingest_csv(GOLDEN.as_bytes()).unwrap();
    assert!(ingested.rejected_rows.is_empty());
    assert_eq!(ingested.series.len(), 2);
    assert_eq!(write_csv(&ingested.series), GOLDEN);
    let present: Vec<usize> = ingested.series.iter().map(|s| s.present_count()).collect();
    assert_eq!(present, [558, 554]);
}

#[test]
fn standardizer_matches_independent_statistics() {
    // Mean and population standard deviation computed outside this crate.
    let ingested = ingest_csv(GOLDEN.as_bytes()).unwrap();
    let kept: Vec<_> = ingested.series.into_iter().filter_map(|s| apply_inclusion(s).series).collect();
    assert_eq!(kept.len(), 2);
    let s = fit_standardizer(&kept).unwrap();
    assert!((s.mean - 8.366663669064755).abs() < 1e-12);
    assert!((s.std - 1.1822953745612135).abs() < 1e-12);
    let p1 = fit_standardizer(&kept[..1]).unwrap();
    assert!((p1.mean - 7.623399641577059).abs() < 1e-12);
    assert!((p1.std - 0.9069146718446229).abs() < 1e-12);
}
