use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bgcast(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgcast")).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn run_dir(output: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&output.stdout);
    PathBuf::from(stdout.lines().last().expect("run directory on stdout").trim())
}

fn synth(out: &Path, patients: &str, days: &str) -> PathBuf {
    let o = bgcast(out, &["--seed", "3", "synth", "--patients", patients, "--days", days]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    run_dir(&o).join("cohort.csv")
}

const TINY: &str = r#"
[experiment]
eval_stride = 24
train_days = [1]

[experiment.scratch]
architecture = { layers = 1, hidden = 4, mlp_hidden = 4, window = 24, dropout = 0.0 }
batch_size = 16
max_epochs = 1
seeds = [0]
max_windows_per_epoch = 32
max_validation_windows = 32
"#;

#[test]
fn synth_writes_manifest_and_never_reuses_a_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let a = bgcast(tmp.path(), &["--seed", "9", "synth", "--patients", "2", "--days", "2"]);
    let b = bgcast(tmp.path(), &["--seed", "9", "synth", "--patients", "2", "--days", "2"]);
    assert!(a.status.success() && b.status.success());
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    assert!(da.ends_with("synth-9-1") && db.ends_with("synth-9-2"));
    assert_eq!(fs::read(da.join("cohort.csv")).unwrap(), fs::read(db.join("cohort.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(da.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 9);
    // Manifests are reproducible, so identical runs differ only in their id.
    let mb: serde_json::Value = serde_json::from_slice(&fs::read(db.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"], mb["files"]);
}

#[test]
fn ingest_reports_rejections() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("in.csv");
    let mut csv = String::from("patient_id,timestamp,glucose_mmol_l\n");
    for i in 0..288 {
        csv.push_str(&format!("p1,2021-01-04T{:02}:{:02}:00Z,{}\n", i / 12, (i % 12) * 5, 6.0 + (i % 7) as f64 * 0.1));
    }
    csv.push_str("p2,2021-01-04T00:00:00Z,5.0\n");
    fs::write(&data, csv).unwrap();
    let o = bgcast(tmp.path(), &["ingest", "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let included = fs::read_to_string(dir.join("included.csv")).unwrap();
    assert!(included.contains("p1") && !included.contains("p2"));
    assert!(fs::read_to_string(dir.join("rejections.txt")).unwrap().contains("p2"));
}

#[test]
fn missing_data_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bgcast(tmp.path(), &["ingest", "--data", "/nonexistent/cohort.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let o = bgcast(tmp.path(), &["--config", cfg.to_str().unwrap(), "gradcheck", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
}

#[test]
fn malformed_csv_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.csv");
    fs::write(&data, "patient_id,timestamp,glucose_mmol_l\np1,not-a-time,5.0\n").unwrap();
    let o = bgcast(tmp.path(), &["ingest", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = bgcast(tmp.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = bgcast(tmp.path(), &["gradcheck", "--seeds", "1", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("head.w"));
}

#[test]
fn fit_arima_writes_a_loadable_document() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "1", "14");
    let o = bgcast(tmp.path(), &["fit-arima", "--data", data.to_str().unwrap(), "--patient", "P001", "--train-days", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(run_dir(&o).join("arima_P001_1d.json")).unwrap();
    bgcast::arima::ArimaDocument::from_json(&text).unwrap();
}

#[test]
fn unknown_patient_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "1", "14");
    let o = bgcast(tmp.path(), &["fit-arima", "--data", data.to_str().unwrap(), "--patient", "nobody", "--train-days", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn experiment_without_pretrained_models_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2", "14");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let args = ["--config", cfg.to_str().unwrap(), "experiment", "--skip-pretrained", "--data", data.to_str().unwrap()];
    let o = bgcast(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let population = fs::read_to_string(dir.join("population_1d.csv")).unwrap();
    assert!(population.contains("locf") && population.contains("patient_arima") && population.contains("patient_lstm"));
    assert!(!population.contains("population_lstm"));

    let again = bgcast(tmp.path(), &args);
    assert!(again.status.success());
    for f in ["population_1d.csv", "patients_1d.csv", "boxplot.csv"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(run_dir(&again).join(f)).unwrap(), "{f}");
    }

    let r = bgcast(tmp.path(), &["report", "--run", dir.to_str().unwrap()]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("train_days = 1"));
}

#[test]
fn pretrained_models_feed_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "7", "14");
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
[experiment.population]
architecture = { layers = 1, hidden = 4, mlp_hidden = 4, window = 24, dropout = 0.0 }
max_epochs = 1
seeds = [0, 1]
max_windows_per_epoch = 32
max_validation_windows = 32

[experiment.finetune]
architecture = { layers = 1, hidden = 4, mlp_hidden = 4, window = 24, dropout = 0.0 }
max_epochs = 1
max_windows_per_epoch = 32
max_validation_windows = 32
"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let d = data.to_str().unwrap();
    let pre = bgcast(tmp.path(), &["--config", c, "pretrain", "--data", d]);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    let store = run_dir(&pre);
    assert!(store.join("population_0.bin").is_file() && store.join("population_1.json").is_file());
    let partition: serde_json::Value = serde_json::from_slice(&fs::read(store.join("partition.json")).unwrap()).unwrap();
    let patient = partition["heldout"][0].as_str().unwrap().to_owned();

    let ft = bgcast(tmp.path(), &["--config", c, "finetune", "--data", d, "--patient", &patient, "--models", store.to_str().unwrap()]);
    assert!(ft.status.success(), "{}", String::from_utf8_lossy(&ft.stderr));
    let dir = run_dir(&ft);
    for seed in 0..2 {
        let stem = format!("finetuned_{patient}_7d_{seed}");
        let model = bgcast::training::TrainedModel::load(&dir, &stem).unwrap();
        assert_eq!(model.params.arch.hidden, 4);
    }
}
