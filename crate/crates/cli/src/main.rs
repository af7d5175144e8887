use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bgcast::arima::{auto_arima, ArimaDocument};
use bgcast::baseline_eval::{population_csv, EvalReport, ModelId, REPORTED_HORIZONS};
use bgcast::cgm_data::{apply_inclusion, fit_standardizer, ingest_csv, render_rejection_report, split_patient_period, write_csv, GlucoseSeries, RejectionEntry, TRAIN_DAY_OPTIONS};
use bgcast::experiment::{run_experiment_with_jobs, write_outputs, ExperimentConfig};
use bgcast::lstm_net::{gradient_check, Architecture, GradCheckReport};
use bgcast::synth::{cohort_profiles, make_cohort, SynthProfile};
use bgcast::training::{finetune_patient, hyper_search, train_patient_scratch, train_population, SearchSpace, TrainedModel};
use bgcast::Error;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

/// Gradient-check pass threshold on the maximum relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "bgcast", version, about = "Short-term blood glucose forecasting from CGM data")]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, patient partitioning and validation splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory under which run directories are created.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV.
    Synth {
        #[arg(long, default_value_t = 50)]
        patients: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
    },
    /// Grid-align a CSV and apply the availability rules.
    Ingest(DataArgs),
    /// Train the population models.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Random-search trials before training; 0 keeps the configured architecture.
        #[arg(long, default_value_t = 0)]
        budget: usize,
    },
    /// Finetune population models on one patient.
    Finetune {
        #[command(flatten)]
        patient: PatientArgs,
        /// Run directory of a `pretrain` run.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train patient models from scratch.
    TrainPatient(PatientArgs),
    /// Fit an auto-selected ARIMA to one patient.
    FitArima(PatientArgs),
    /// Full evaluation over held-out patients.
    Experiment {
        #[command(flatten)]
        data: DataArgs,
        /// Run directory of a `pretrain` run to reuse.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Only patient-level models and LOCF.
        #[arg(long)]
        skip_pretrained: bool,
        /// Restrict the training-slice lengths.
        #[arg(long = "train-days", num_args = 1..)]
        train_days: Vec<usize>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Number of seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Perturb one analytic coordinate to exercise the failure path.
        #[arg(long)]
        corrupt: bool,
    },
    /// Print the population tables of an experiment run.
    Report {
        /// Run directory of an `experiment` run.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Cohort CSV (patient_id,timestamp,glucose_mmol_l).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PatientArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    patient: String,
    #[arg(long = "train-days", default_value_t = 7)]
    train_days: usize,
}

/// Run configuration file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    data: Option<PathBuf>,
    model_store: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
    /// Reported horizons in minutes.
    horizons: Option<Vec<usize>>,
    synth: Option<SynthProfile>,
    experiment: ExperimentConfig,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Verify(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Context {
    config: RunConfig,
    seed: u64,
    jobs: usize,
    out: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> CliResult<Self> {
        let config = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(h) = &config.horizons {
            if h.is_empty() || h.iter().any(|m| *m == 0 || *m % 5 != 0 || *m > 90) {
                return Err(CliError::Usage(format!("horizons must be multiples of 5 minutes up to 90, got {h:?}")));
            }
        }
        let seed = cli.seed.or(config.seed).unwrap_or(0);
        let jobs = cli.jobs.or(config.jobs).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        let out = cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Self { config, seed, jobs, out })
    }

    fn experiment_config(&self) -> ExperimentConfig {
        let mut c = self.config.experiment.clone();
        c.partition_seed = self.seed;
        for t in [&mut c.population, &mut c.finetune, &mut c.scratch] {
            t.split_seed = self.seed;
        }
        c
    }

    fn data_path(&self, args: &DataArgs) -> CliResult<PathBuf> {
        let path = args
            .data
            .clone()
            .or_else(|| self.config.data.clone())
            .ok_or_else(|| CliError::Usage("no data path: pass --data or set `data` in the config".into()))?;
        if !path.is_file() {
            return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
        }
        Ok(path)
    }

    /// A fresh directory `<out>/<command>-<seed>-<n>` with the smallest
    /// unused `n`; existing runs are never touched.
    fn run_dir(&self, command: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out)?;
        for n in 1.. {
            let dir = self.out.join(format!("{command}-{}-{n}", self.seed));
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("run ids are unbounded")
    }

    fn pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> CliResult<T> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(pool.install(f))
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    run_id: String,
    seed: u64,
    version: &'static str,
    inputs: Vec<String>,
    config: &'a RunConfig,
    files: Vec<String>,
}

fn write_manifest(ctx: &Context, dir: &Path, command: &str, inputs: Vec<String>, mut files: Vec<String>) -> CliResult<()> {
    files.sort();
    let manifest = Manifest {
        command,
        run_id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        seed: ctx.seed,
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        config: &ctx.config,
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    println!("{}", dir.display());
    Ok(())
}

/// Ingest and apply the availability rules.
fn load_cohort(path: &Path) -> CliResult<(Vec<GlucoseSeries>, Vec<RejectionEntry>)> {
    let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let ingested = ingest_csv(file)?;
    for r in &ingested.rejected_rows {
        eprintln!("row {} rejected: {}", r.row, r.reason);
    }
    let mut kept = Vec::new();
    let mut report = Vec::new();
    for s in ingested.series {
        let r = apply_inclusion(s);
        report.extend(r.report);
        kept.extend(r.series);
    }
    if kept.is_empty() {
        return Err(CliError::Data(format!("no patient in {} passes the availability rules", path.display())));
    }
    Ok((kept, report))
}

fn patient_slice(cohort: &[GlucoseSeries], args: &PatientArgs) -> CliResult<GlucoseSeries> {
    if !TRAIN_DAY_OPTIONS.contains(&args.train_days) {
        return Err(CliError::Usage(format!("--train-days must be one of {TRAIN_DAY_OPTIONS:?}")));
    }
    let series = cohort
        .iter()
        .find(|s| s.patient_id == args.patient)
        .ok_or_else(|| CliError::Data(format!("patient {} not found or excluded", args.patient)))?;
    Ok(split_patient_period(series, args.train_days)?.0)
}

fn model_stems(dir: &Path, prefix: &str) -> CliResult<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read model directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".bin")).map(str::to_owned))
        .filter(|n| n.starts_with(prefix))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Usage(format!("no {prefix}*.bin models in {}", dir.display())));
    }
    Ok(stems)
}

fn load_models(dir: &Path, prefix: &str) -> CliResult<Vec<TrainedModel>> {
    model_stems(dir, prefix)?.iter().map(|s| TrainedModel::load(dir, s).map_err(CliError::from)).collect()
}

fn save_models(dir: &Path, prefix: &str, models: &[TrainedModel]) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    for m in models {
        files.extend(m.save(dir, &format!("{prefix}{}", m.provenance.seed))?);
    }
    Ok(files)
}

fn cmd_synth(ctx: &Context, patients: usize, days: usize) -> CliResult<()> {
    if patients == 0 || days == 0 {
        return Err(CliError::Usage("--patients and --days must be at least 1".into()));
    }
    let template = SynthProfile { days, ..ctx.config.synth.clone().unwrap_or_default() };
    let cohort = make_cohort(patients, &template, ctx.seed)?;
    let dir = ctx.run_dir("synth")?;
    fs::write(dir.join("cohort.csv"), write_csv(&cohort))?;
    let profiles: Vec<serde_json::Value> = cohort_profiles(patients, &template, ctx.seed)
        .into_iter()
        .map(|(id, p)| serde_json::json!({ "patient_id": id, "profile": p }))
        .collect();
    fs::write(dir.join("profiles.json"), serde_json::to_vec_pretty(&profiles)?)?;
    write_manifest(ctx, &dir, "synth", Vec::new(), vec!["cohort.csv".into(), "profiles.json".into()])
}

fn cmd_ingest(ctx: &Context, args: &DataArgs) -> CliResult<()> {
    let path = ctx.data_path(args)?;
    let (cohort, report) = load_cohort(&path)?;
    let dir = ctx.run_dir("ingest")?;
    fs::write(dir.join("included.csv"), write_csv(&cohort))?;
    fs::write(dir.join("rejections.txt"), render_rejection_report(&report))?;
    eprintln!("{} patients kept, {} rejection entries", cohort.len(), report.len());
    write_manifest(ctx, &dir, "ingest", vec![path.display().to_string()], vec!["included.csv".into(), "rejections.txt".into()])
}

fn cmd_pretrain(ctx: &Context, args: &DataArgs, budget: usize) -> CliResult<()> {
    let path = ctx.data_path(args)?;
    let (cohort, _) = load_cohort(&path)?;
    let exp = ctx.experiment_config();
    exp.validate()?;
    let ids: Vec<String> = cohort.iter().map(|s| s.patient_id.clone()).collect();
    let partition = bgcast::cgm_data::partition_population(&ids, exp.partition_seed)?;
    let train: Vec<GlucoseSeries> = cohort.into_iter().filter(|s| partition.population_train.contains(&s.patient_id)).collect();
    let dir = ctx.run_dir("pretrain")?;
    let mut files = Vec::new();
    let mut config = exp.population.clone();
    if budget > 0 {
        let search = ctx.pool(|| hyper_search(&train, &SearchSpace::default(), budget, &config, ctx.seed))??;
        fs::write(dir.join("search.json"), serde_json::to_vec_pretty(&search.trials)?)?;
        files.push("search.json".into());
        config = search.best;
    }
    let models = ctx.pool(|| train_population(&train, &config))??;
    files.extend(save_models(&dir, "population_", &models)?);
    fs::write(dir.join("partition.json"), serde_json::to_vec_pretty(&partition)?)?;
    files.push("partition.json".into());
    write_manifest(ctx, &dir, "pretrain", vec![path.display().to_string()], files)
}

fn cmd_finetune(ctx: &Context, args: &PatientArgs, models: Option<&Path>) -> CliResult<()> {
    let store = models
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.model_store.clone())
        .ok_or_else(|| CliError::Usage("no population models: pass --models or set `model_store`".into()))?;
    let population = load_models(&store, "population_")?;
    let path = ctx.data_path(&args.data)?;
    let (cohort, _) = load_cohort(&path)?;
    let slice = patient_slice(&cohort, args)?;
    let mut config = ctx.experiment_config().finetune;
    config.architecture = population[0].params.arch;
    let tuned = ctx.pool(|| population.iter().map(|m| finetune_patient(m, &slice, &config)).collect::<bgcast::Result<Vec<_>>>())??;
    let dir = ctx.run_dir("finetune")?;
    let files = save_models(&dir, &format!("finetuned_{}_{}d_", args.patient, args.train_days), &tuned)?;
    write_manifest(ctx, &dir, "finetune", vec![path.display().to_string(), store.display().to_string()], files)
}

fn cmd_train_patient(ctx: &Context, args: &PatientArgs) -> CliResult<()> {
    let path = ctx.data_path(&args.data)?;
    let (cohort, _) = load_cohort(&path)?;
    let slice = patient_slice(&cohort, args)?;
    let config = ctx.experiment_config().scratch;
    let models = ctx.pool(|| train_patient_scratch(&slice, &config))??;
    let dir = ctx.run_dir("train-patient")?;
    let files = save_models(&dir, &format!("scratch_{}_{}d_", args.patient, args.train_days), &models)?;
    write_manifest(ctx, &dir, "train-patient", vec![path.display().to_string()], files)
}

fn cmd_fit_arima(ctx: &Context, args: &PatientArgs) -> CliResult<()> {
    let path = ctx.data_path(&args.data)?;
    let (cohort, _) = load_cohort(&path)?;
    let slice = patient_slice(&cohort, args)?;
    let s = fit_standardizer(std::slice::from_ref(&slice))?;
    let values = slice.interpolated().ok_or_else(|| CliError::Data("empty training slice".into()))?;
    let z: Vec<f64> = values.iter().map(|v| s.standardize(*v)).collect();
    let (model, diagnostics) = auto_arima(&z, ctx.experiment_config().arima_bounds)?;
    let dir = ctx.run_dir("fit-arima")?;
    let name = format!("arima_{}_{}d.json", args.patient, args.train_days);
    fs::write(dir.join(&name), ArimaDocument::new(model.clone(), s).to_json()?)?;
    fs::write(dir.join("diagnostics.json"), serde_json::to_vec_pretty(&diagnostics)?)?;
    eprintln!("selected ARIMA({},{},{}) AIC {:.3}", model.order.p, model.order.d, model.order.q, model.aic);
    write_manifest(ctx, &dir, "fit-arima", vec![path.display().to_string()], vec![name, "diagnostics.json".into()])
}

fn cmd_experiment(ctx: &Context, args: &DataArgs, models: Option<&Path>, skip_pretrained: bool, train_days: &[usize]) -> CliResult<()> {
    let path = ctx.data_path(args)?;
    let (cohort, rejections) = load_cohort(&path)?;
    let mut config = ctx.experiment_config();
    config.skip_pretrained |= skip_pretrained;
    if !train_days.is_empty() {
        config.train_days = train_days.to_vec();
    }
    config.validate()?;
    let store = models.map(Path::to_path_buf).or_else(|| ctx.config.model_store.clone());
    let pretrained = match (&store, config.skip_pretrained) {
        (Some(dir), false) => Some(load_models(dir, "population_")?),
        _ => None,
    };
    let output = run_experiment_with_jobs(&cohort, &config, pretrained, ctx.jobs)?;
    let dir = ctx.run_dir("experiment")?;
    let mut files = write_outputs(&dir, &output)?;
    fs::write(dir.join("rejections.txt"), render_rejection_report(&rejections))?;
    files.push("rejections.txt".into());
    if store.is_none() && !config.skip_pretrained {
        files.extend(save_models(&dir, "population_", &output.population_models)?);
    }
    let mut inputs = vec![path.display().to_string()];
    inputs.extend(store.map(|s| s.display().to_string()));
    write_manifest(ctx, &dir, "experiment", inputs, files)
}

fn print_gradcheck(r: &GradCheckReport) {
    println!(
        "seed {:>3}: max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}) over {} coordinates",
        r.seed, r.max_relative_error, r.worst_param, r.analytic, r.numeric, r.checked
    );
}

fn cmd_gradcheck(ctx: &Context, seeds: u64, corrupt: bool) -> CliResult<()> {
    let arch = Architecture { layers: 2, hidden: 4, mlp_hidden: 4, window: 8, dropout: 0.0 };
    let reports: Vec<GradCheckReport> = (ctx.seed..ctx.seed + seeds.max(1)).map(|seed| gradient_check(arch, seed, 8, 1e-5, None, corrupt)).collect::<bgcast::Result<_>>()?;
    reports.iter().for_each(print_gradcheck);
    let worst = reports.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).expect("at least one seed");
    if worst.max_relative_error < GRADCHECK_TOLERANCE {
        println!("PASS: max relative error {:.3e} < {GRADCHECK_TOLERANCE:e}", worst.max_relative_error);
        Ok(())
    } else {
        Err(CliError::Verify(format!("max relative error {:.3e} at {} (seed {})", worst.max_relative_error, worst.worst_param, worst.seed)))
    }
}

fn cmd_report(ctx: &Context, run: &Path) -> CliResult<()> {
    let text = fs::read(run.join("report.json")).map_err(|e| CliError::Usage(format!("no report.json in {}: {e}", run.display())))?;
    let reports: Vec<EvalReport> = serde_json::from_slice(&text)?;
    let minutes: Vec<usize> = ctx.config.horizons.clone().unwrap_or_else(|| REPORTED_HORIZONS.iter().map(|j| j * 5).collect());
    for r in &reports {
        if ctx.config.horizons.is_none() {
            println!("# train_days = {}", r.train_days);
            print!("{}", population_csv(r));
            continue;
        }
        println!("# train_days = {}", r.train_days);
        println!("model,horizon_min,mean_mae,mean_rmse");
        for m in ModelId::ALL {
            for &min in &minutes {
                if let Some(row) = r.population_row(m, min / 5) {
                    println!("{m},{min},{},{}", row.mean_mae, row.mean_rmse);
                }
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context::new(&cli)?;
    match &cli.command {
        Command::Synth { patients, days } => cmd_synth(&ctx, *patients, *days),
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Pretrain { data, budget } => cmd_pretrain(&ctx, data, *budget),
        Command::Finetune { patient, models } => cmd_finetune(&ctx, patient, models.as_deref()),
        Command::TrainPatient(a) => cmd_train_patient(&ctx, a),
        Command::FitArima(a) => cmd_fit_arima(&ctx, a),
        Command::Experiment { data, models, skip_pretrained, train_days } => cmd_experiment(&ctx, data, models.as_deref(), *skip_pretrained, train_days),
        Command::Gradcheck { seeds, corrupt } => cmd_gradcheck(&ctx, *seeds, *corrupt),
        Command::Report { run } => cmd_report(&ctx, run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Verify(m)) => {
            eprintln!("FAIL: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
