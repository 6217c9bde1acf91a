//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 when every run or
//! trial diverged, 1 anything else.

pub mod family;
pub mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    read_features, write_features, DataError, Dataset, LabelOrder, Split, SyntheticSpec,
};
use crate::hyperband::{
    self, Config, HyperbandError, Objective, RunOptions, Trial, TrialOutcome, TrialStatus,
};
use crate::metrics::{
    f1_report, order_statistics, read_predictions, split_records, write_predictions, F1Report,
    PredictionRecord,
};
use crate::trainer::{self, Checkpoint, TrainError, TrainStatus};

pub use family::{family, slug, Family, FAMILIES, HYPER_KEYS};
pub use report::{build_report, MetricSummary, OrderFile, ResultFile, RunResult};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Data(_) | TrainError::EmptySplit(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<HyperbandError> for CliError {
    fn from(e: HyperbandError) -> Self {
        match e {
            HyperbandError::InvalidPlan(_) | HyperbandError::InvalidSpace(_) => {
                CliError::Usage(e.to_string())
            }
            HyperbandError::AllDiverged(_) => CliError::Diverged(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "setpred",
    version,
    about = "Image-to-set prediction experiments on feature grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (FSET file plus JSON manifest).
    Generate(GenerateArgs),
    /// Train one family for one or more seeds and score the test split.
    Train(TrainArgs),
    /// Run a Hyperband sweep for one family.
    Tune(TuneArgs),
    /// Score a checkpoint on a split, or a prediction file.
    Eval(EvalArgs),
    /// Label-pair order statistics of a dataset as CSV.
    Order(OrderArgs),
    /// Leaderboard and CSV tables from a directory of results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with synthetic spec fields; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Dataset name stored in the manifest (default: file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    mean_cardinality: Option<f64>,
    #[arg(long)]
    max_cardinality: Option<usize>,
    #[arg(long)]
    p_empty: Option<f64>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// `canonical` or `random`.
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

/// Options shared by `train` and `tune`, also loadable from `--config`.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub family: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub hyper: Config,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub eta: Option<u64>,
    pub big_r: Option<u64>,
    pub epochs_per_unit: Option<f64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON experiment config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One of the 13 family names, e.g. FF_BCE or "FF_BCE,C".
    #[arg(long)]
    family: Option<String>,
    /// Hyperparameter override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Epoch budget per seed.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    eta: Option<u64>,
    #[arg(long)]
    big_r: Option<u64>,
    #[arg(long)]
    epochs_per_unit: Option<f64>,
    /// Parallel trials; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed of the sweep.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Score this JSON-lines prediction file instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Label count for `--predictions` when no dataset is given.
    #[arg(long)]
    n_labels: Option<usize>,
    /// Write the checkpoint's predictions here.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OrderArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding `*.result.json` and `*.order.json` files.
    #[arg(long)]
    results: PathBuf,
    /// Output directory (default: the results directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_ETA: u64 = 3;
pub const DEFAULT_BIG_R: u64 = 600;
pub const DEFAULT_EPOCHS_PER_UNIT: f64 = 0.15;

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("setpred: {e}");
            e.exit_code()
        }
    }
}

/// Runs a command line, writing its primary output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").map_err(|e| CliError::Runtime(e.to_string()))?;
                return Ok(());
            }
            return Err(CliError::Usage(
                e.render().to_string().trim_end().to_string(),
            ));
        }
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Tune(a) => cmd_tune(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Order(a) => cmd_order(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let bytes = fs::read(p).map_err(io_err(p))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    over!(
        n_labels,
        feature_dim,
        grid_w,
        grid_h,
        mean_cardinality,
        max_cardinality,
        p_empty,
        zipf_exponent,
        noise_sigma,
        n_train,
        n_val,
        n_test
    );
    if let Some(o) = &a.order {
        spec.order = match o.as_str() {
            "canonical" => LabelOrder::Canonical,
            "random" => LabelOrder::Random,
            other => {
                return Err(CliError::Usage(format!(
                "invalid synthetic spec field `order`: `{other}` is neither canonical nor random"
            )))
            }
        };
    }
    let mut ds = crate::data::generate_synthetic(&spec, a.seed)?;
    ds.name = match a.name {
        Some(n) => n,
        None => a
            .out
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or(ds.name),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_features(&a.out, &ds)?;
    let stats = crate::data::dataset_stats(&ds)?;
    emit(out, &to_json(&stats))
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(io_err(p))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

/// Parses `key=value` overrides on top of `base`.
pub fn parse_overrides(base: &Config, sets: &[String]) -> Result<Config, CliError> {
    let mut c = base.clone();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`--set {s}` is not KEY=VALUE")))?;
        let k = k.trim();
        if !HYPER_KEYS.contains(&k) {
            return Err(CliError::Usage(format!(
                "unknown hyperparameter `{k}` (known: {})",
                HYPER_KEYS.join(", ")
            )));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("`{k}` needs a number, got `{v}`")))?;
        c.insert(k.to_string(), v);
    }
    Ok(c)
}

struct Resolved {
    config: ExperimentConfig,
    family: &'static Family,
    dataset: Dataset,
    out: PathBuf,
}

fn resolve(common: &CommonArgs) -> Result<Resolved, CliError> {
    let mut config = load_config(&common.config)?;
    if common.dataset.is_some() {
        config.dataset = common.dataset.clone();
    }
    if common.family.is_some() {
        config.family = common.family.clone();
    }
    if common.out.is_some() {
        config.out = common.out.clone();
    }
    config.hyper = parse_overrides(&config.hyper, &common.set)?;
    let name = config
        .family
        .clone()
        .ok_or_else(|| CliError::Usage("--family is required".into()))?;
    let family = family(&name).ok_or_else(|| {
        let names: Vec<&str> = FAMILIES.iter().map(|f| f.name).collect();
        CliError::Usage(format!(
            "unknown family `{name}` (known: {})",
            names.join(", ")
        ))
    })?;
    let path = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let dataset = read_features(&path)?;
    family.check_dataset(&dataset).map_err(CliError::Usage)?;
    family.setup(&config.hyper, 0, 0).map_err(CliError::Usage)?;
    Ok(Resolved {
        config,
        family,
        dataset,
        out,
    })
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn status_name(s: &TrainStatus) -> String {
    match s {
        TrainStatus::Running => "completed".into(),
        TrainStatus::EarlyStopped => "early_stopped".into(),
        TrainStatus::Diverged(why) => format!("diverged: {why}"),
    }
}

/// Test-split predictions and scores of the checkpoint's best model, or
/// `None` if it diverged before its first evaluation.
fn score_checkpoint(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
) -> Result<Option<(F1Report, Vec<PredictionRecord>)>, CliError> {
    if matches!(ckpt.status, TrainStatus::Diverged(_)) && ckpt.best.is_none() {
        return Ok(None);
    }
    let mut model = ckpt.best_model()?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(CliError::Data(format!(
            "split {split:?} of `{}` is empty",
            ds.name
        )));
    }
    let pred = trainer::predict(
        &mut model,
        ds,
        &idx,
        &ckpt.setup.decode,
        ckpt.setup.train.seed,
    )?;
    let records: Vec<PredictionRecord> = idx
        .iter()
        .zip(pred)
        .map(|(&id, pred)| PredictionRecord {
            id,
            gt: ds.samples[id].labels.clone(),
            pred,
        })
        .collect();
    let (gt, pred) = split_records(&records);
    let report =
        f1_report(&gt, &pred, ds.n_labels()).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(Some((report, records)))
}

fn predictions_bytes(records: &[PredictionRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, records).expect("writing to memory");
    buf
}

fn order_file(ds: &Dataset) -> OrderFile {
    OrderFile {
        dataset: ds.name.clone(),
        labels: ds.dictionary.labels().to_vec(),
        pairs: order_statistics(ds).pairs,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let Resolved {
        mut config,
        family,
        dataset: ds,
        out: dir,
    } = resolve(&a.common)?;
    if a.seeds.is_some() {
        config.seeds = a.seeds;
    }
    if a.epochs.is_some() {
        config.epochs = a.epochs;
    }
    let seeds = config.seeds.clone().unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let epochs = config.epochs.unwrap_or(DEFAULT_EPOCHS);
    if epochs == 0 {
        return Err(CliError::Usage("--epochs must be at least 1".into()));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let stem = format!("{}__{}", file_safe(&ds.name), file_safe(&slug(family.name)));

    let mut runs = Vec::new();
    let mut table = String::from(
        "| Seed | Epochs | Best val O-F1 | O-F1 | C-F1 | I-F1 | Card. err | Status |\n|---:|---:|---:|---:|---:|---:|---:|---|\n",
    );
    for &seed in &seeds {
        let setup = family
            .setup(&config.hyper, seed, 0)
            .map_err(CliError::Usage)?;
        let mut ckpt = Checkpoint::new(setup, &ds)?;
        trainer::train(&mut ckpt, &ds, epochs)?;
        ckpt.save(&dir.join(format!("{stem}__seed{seed}.ckpt")))?;
        let scored = score_checkpoint(&ckpt, &ds, Split::Test)?;
        let test = match &scored {
            Some((report, records)) => {
                write_file(
                    &dir.join(format!("{stem}__seed{seed}.predictions.jsonl")),
                    &predictions_bytes(records),
                )?;
                Some(MetricSummary::from(report))
            }
            None => None,
        };
        let run = RunResult {
            seed,
            epochs: ckpt.epoch,
            best_epoch: ckpt.best_epoch,
            best_val_o_f1: ckpt.best_val,
            status: status_name(&ckpt.status),
            test,
        };
        let _ = writeln!(
            table,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            seed,
            run.epochs,
            fmt_opt(run.best_val_o_f1),
            fmt_opt(test.map(|t| t.o_f1)),
            fmt_opt(test.map(|t| t.c_f1)),
            fmt_opt(test.map(|t| t.i_f1)),
            fmt_opt(test.map(|t| t.cardinality_error)),
            run.status
        );
        eprintln!("{} seed {seed}: {}", family.name, run.status);
        runs.push(run);
    }
    let result = ResultFile::new(
        ds.name.clone(),
        family.name.to_string(),
        config.hyper.clone(),
        runs,
    );
    write_file(
        &dir.join(format!("{stem}{}", report::RESULT_SUFFIX)),
        to_json(&result).as_bytes(),
    )?;
    write_file(
        &dir.join(format!("{}{}", file_safe(&ds.name), report::ORDER_SUFFIX)),
        to_json(&order_file(&ds)).as_bytes(),
    )?;
    if let (Some(m), Some(s)) = (result.mean, result.std) {
        let _ = writeln!(
            table,
            "| mean (std) | | | {:.4} ({:.4}) | {:.4} ({:.4}) | {:.4} ({:.4}) | {:.4} ({:.4}) | |",
            m.o_f1,
            s.o_f1,
            m.c_f1,
            s.c_f1,
            m.i_f1,
            s.i_f1,
            m.cardinality_error,
            s.cardinality_error
        );
    }
    emit(out, &table)?;
    if result.mean.is_none() {
        return Err(CliError::Diverged(format!(
            "every seed of {} diverged before its first evaluation",
            family.name
        )));
    }
    Ok(())
}

/// Trains family members for the tuner, resuming from checkpoint bytes.
pub struct FamilyObjective<'a> {
    pub family: &'static Family,
    pub dataset: &'a Dataset,
    /// Fixed overrides; sampled values take precedence.
    pub base: Config,
}

impl Objective for FamilyObjective<'_> {
    fn train(
        &self,
        trial: &Trial,
        epochs: usize,
        resume: Option<&[u8]>,
    ) -> Result<TrialOutcome, String> {
        let mut ckpt = match resume {
            Some(bytes) => Checkpoint::from_bytes(bytes).map_err(|e| e.to_string())?,
            None => {
                let mut hyper = self.base.clone();
                hyper.extend(trial.config.iter().map(|(k, v)| (k.clone(), *v)));
                let setup = self
                    .family
                    .setup(&hyper, trial.master_seed, trial.id as u64)?;
                Checkpoint::new(setup, self.dataset).map_err(|e| e.to_string())?
            }
        };
        trainer::train(&mut ckpt, self.dataset, epochs).map_err(|e| e.to_string())?;
        let status = match ckpt.status {
            TrainStatus::Running => TrialStatus::Completed,
            TrainStatus::EarlyStopped => TrialStatus::EarlyStopped,
            TrainStatus::Diverged(_) => TrialStatus::Diverged,
        };
        Ok(TrialOutcome {
            val_o_f1: ckpt.best_val,
            status,
            checkpoint: ckpt.to_bytes().map_err(|e| e.to_string())?,
        })
    }
}

/// Summary written to `best.json` after a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub dataset: String,
    pub family: String,
    pub eta: u64,
    pub big_r: u64,
    pub epochs_per_unit: f64,
    pub master_seed: u64,
    pub total_configs: usize,
    pub best_trial: usize,
    pub best_config: Config,
    pub best_val_o_f1: f64,
    pub best_units: u64,
    pub best_epochs: usize,
    pub test: Option<MetricSummary>,
}

pub const SWEEP_LOG: &str = "sweep.jsonl";
pub const BEST_SUMMARY: &str = "best.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn cmd_tune(a: TuneArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let Resolved {
        mut config,
        family,
        dataset: ds,
        out: dir,
    } = resolve(&a.common)?;
    macro_rules! take {
        ($($f:ident),*) => { $( if a.$f.is_some() { config.$f = a.$f; } )* };
    }
    take!(eta, big_r, epochs_per_unit, workers, seed);
    let mut opts = RunOptions::new(
        config.eta.unwrap_or(DEFAULT_ETA),
        config.big_r.unwrap_or(DEFAULT_BIG_R),
        config.epochs_per_unit.unwrap_or(DEFAULT_EPOCHS_PER_UNIT),
        config.seed.unwrap_or(0),
    );
    opts.workers = config.workers.unwrap_or(0);
    opts.log = Some(dir.join(SWEEP_LOG));
    opts.checkpoint_dir = Some(dir.join("checkpoints"));
    hyperband::plan(opts.eta, opts.big_r)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let objective = FamilyObjective {
        family,
        dataset: &ds,
        base: config.hyper.clone(),
    };
    let outcome = hyperband::run(&family.search_space(), &objective, &opts)?;
    let best = &outcome.best;
    let bytes = fs::read(&best.checkpoint).map_err(io_err(Path::new(&best.checkpoint)))?;
    write_file(&dir.join(BEST_CHECKPOINT), &bytes)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let test = score_checkpoint(&ckpt, &ds, Split::Test)?.map(|(r, _)| MetricSummary::from(&r));
    let summary = TuneSummary {
        dataset: ds.name.clone(),
        family: family.name.to_string(),
        eta: opts.eta,
        big_r: opts.big_r,
        epochs_per_unit: opts.epochs_per_unit,
        master_seed: opts.master_seed,
        total_configs: outcome.plan.total_configs(),
        best_trial: best.trial,
        best_config: best.config.clone(),
        best_val_o_f1: best.score(),
        best_units: best.units,
        best_epochs: best.epochs,
        test,
    };
    write_file(&dir.join(BEST_SUMMARY), to_json(&summary).as_bytes())?;
    emit(out, &to_json(&summary))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`"))),
    }
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = match (&a.predictions, &a.checkpoint) {
        (Some(path), None) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            let records = read_predictions(BufReader::new(file))
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let n = match (a.n_labels, &a.dataset) {
                (Some(n), _) => n,
                (None, Some(d)) => read_features(d)?.n_labels(),
                (None, None) => {
                    return Err(CliError::Usage(
                        "--predictions needs --n-labels or --dataset".into(),
                    ))
                }
            };
            let (gt, pred) = split_records(&records);
            f1_report(&gt, &pred, n).map_err(|e| CliError::Data(e.to_string()))?
        }
        (None, Some(path)) => {
            let ds_path = a
                .dataset
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint needs --dataset".into()))?;
            let ds = read_features(ds_path)?;
            let ckpt = Checkpoint::load(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if ckpt.model.n_labels != ds.n_labels() || ckpt.model.d_in != ds.grid.d {
                return Err(CliError::Data(format!(
                    "checkpoint expects N = {}, d = {} but the dataset has N = {}, d = {}",
                    ckpt.model.n_labels,
                    ckpt.model.d_in,
                    ds.n_labels(),
                    ds.grid.d
                )));
            }
            let split = parse_split(&a.split)?;
            let (report, records) = score_checkpoint(&ckpt, &ds, split)?.ok_or_else(|| {
                CliError::Diverged("checkpoint diverged before any evaluation".into())
            })?;
            if let Some(p) = &a.predictions_out {
                write_file(p, &predictions_bytes(&records))?;
            }
            report
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --checkpoint or --predictions".into(),
            ))
        }
    };
    emit(out, &to_json(&report))
}

fn cmd_order(a: OrderArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = read_features(&a.dataset)?;
    let mut csv = format!("{}\n", report::ORDER_CSV_HEADER);
    order_file(&ds).csv_rows(&mut csv);
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes()),
        None => emit(out, &csv),
    }
}

pub const LEADERBOARD_MD: &str = "leaderboard.md";
pub const LEADERBOARD_CSV: &str = "leaderboard.csv";
pub const CARDINALITY_CSV: &str = "cardinality.csv";
pub const ORDER_CSV: &str = "order_statistics.csv";

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (results, orders) = report::load_dir(&a.results).map_err(CliError::Data)?;
    if results.is_empty() {
        return Err(CliError::Data(format!(
            "no *{} files in {}",
            report::RESULT_SUFFIX,
            a.results.display()
        )));
    }
    let rep = build_report(&results, &orders).map_err(CliError::Data)?;
    let dir = a.out.unwrap_or(a.results);
    write_file(&dir.join(LEADERBOARD_MD), rep.markdown.as_bytes())?;
    write_file(&dir.join(LEADERBOARD_CSV), rep.leaderboard_csv.as_bytes())?;
    write_file(&dir.join(CARDINALITY_CSV), rep.cardinality_csv.as_bytes())?;
    write_file(&dir.join(ORDER_CSV), rep.order_csv.as_bytes())?;
    emit(out, &rep.markdown)
}
