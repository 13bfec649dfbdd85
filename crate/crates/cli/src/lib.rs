//! Subcommands of the `qtraj` binary.
//!
//! Every command reads a JSON [`RunConfig`] (optional), applies flag
//! overrides on top, validates its paths, and writes its outputs plus a
//! `<output>.manifest.json` echoing the effective configuration and seed.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qtraj::analysis::{
    bootstrap_ci, calibrate, calibration_pairs, diffusion_map, drift_map, fit_params, initial_predictions, tomography,
    write_calibration_csv, write_map_csv, CalibrationReport, GridSpec, PhysParams, TomographyResult, DEFAULT_DELTA,
    DEFAULT_RESAMPLES,
};
use qtraj::data::{read_dataset, split, write_dataset, Dataset};
use qtraj::infer::{
    predict_dataset, prediction_rows, read_predictions_csv, series_from_rows, write_predictions_csv, ConditionMode,
    PredictionRow, PredictionSeries,
};
use qtraj::nn::{read_model, train_with_progress, write_model, Activation, Direction, EpochStats, TrainConfig};
use qtraj::qubit::Label;
use qtraj::sim::{generate_shots, retro_filter, sme_filter, SimConfig};

pub const SEED_ENV: &str = "QTRAJ_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<qtraj::Error> for CliError {
    fn from(e: qtraj::Error) -> Self {
        use qtraj::Error as E;
        match e {
            E::Invalid(_) | E::Json(_) => CliError::Config(e.to_string()),
            E::Io(_) | E::Format(_) => CliError::Io(e.to_string()),
            E::Numeric(_) | E::Diverged(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Options shared by all commands, as stored in a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub delta: f64,
    pub eval_fraction: f64,
    pub resamples: usize,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            delta: DEFAULT_DELTA,
            eval_fraction: 0.2,
            resamples: DEFAULT_RESAMPLES,
            seed: None,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qtraj", version, about = "Continuously monitored qubit trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed (falls back to the config file, then QTRAJ_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs. Default: all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Forward,
    Backward,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Backward => Direction::Backward,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Column {
    Forward,
    Backward,
    Smoothed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate measurement records into a dataset file.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Total traces, cycled over the 18 settings and the duration grid.
        #[arg(long)]
        traces: u64,
    },
    /// Exact filter predictions (forward, backward and smoothed) as CSV.
    Filter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a forward or backward network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long)]
        model_out: PathBuf,
        /// Per-epoch loss history CSV; defaults to `<model_out>.history.csv`.
        #[arg(long)]
        history_out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, value_parser = parse_activation)]
        activation: Option<Activation>,
        #[arg(long)]
        unknown_fraction: Option<f64>,
        #[arg(long)]
        eval_fraction: Option<f64>,
    },
    /// Network predictions for every record as CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Condition on the uniform "unknown" label instead of the record's.
        #[arg(long)]
        unknown: bool,
    },
    /// Combine a forward and a backward prediction CSV.
    Smooth {
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        backward: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibration report of predictions against recorded outcomes.
    Validate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report; bins go to `<out>.bins.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "forward")]
        column: Column,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Drift / diffusion maps and fitted physical parameters.
    Estimate {
        #[arg(long)]
        predictions: PathBuf,
        /// JSON parameters; maps go to `<out>.drift.csv` and `<out>.diffusion.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "forward")]
        column: Column,
    },
    /// Initial-state reconstruction per preparation with bootstrap intervals.
    Tomography {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resamples: Option<usize>,
    },
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: qtraj::Error| e.to_string())
}

/// Record of one invocation, written next to its primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub workers: Option<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: &'a RunConfig,
}

fn manifest_path(out: &Path) -> PathBuf {
    with_suffix(out, "manifest.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn check_input(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("input {} does not exist or is not a file", p.display())))
    }
}

fn check_output(p: &Path) -> CliResult<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Io(format!("output directory {} does not exist", parent.display())));
    }
    if p.is_dir() {
        return Err(CliError::Io(format!("output {} is a directory", p.display())));
    }
    Ok(())
}

fn create(p: &Path) -> CliResult<BufWriter<File>> {
    File::create(p).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> CliResult<()> {
    let mut w = create(p)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_dataset(p: &Path) -> CliResult<Dataset> {
    read_dataset(p).map_err(|e| CliError::from(e).context(p))
}

impl CliError {
    fn context(self, p: &Path) -> CliError {
        let tag = |m: String| format!("{}: {m}", p.display());
        match self {
            CliError::Config(m) => CliError::Config(tag(m)),
            CliError::Io(m) => CliError::Io(tag(m)),
            CliError::Numeric(m) => CliError::Numeric(tag(m)),
        }
    }
}

/// Simulation settings of a dataset: those stored in its manifest, else the
/// run configuration.
fn dataset_sim(ds: &Dataset, cfg: &RunConfig) -> SimConfig {
    ds.manifest.config.clone().unwrap_or_else(|| cfg.sim.clone())
}

fn read_rows(p: &Path) -> CliResult<Vec<PredictionRow>> {
    let f = File::open(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    read_predictions_csv(BufReader::new(f)).map_err(|e| CliError::from(e).context(p))
}

fn write_rows(p: &Path, rows: &[PredictionRow]) -> CliResult<()> {
    let mut w = create(p)?;
    write_predictions_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn column_series(rows: &[PredictionRow], column: Column) -> CliResult<Vec<PredictionSeries>> {
    Ok(series_from_rows(rows, |r| match column {
        Column::Forward => r.p_forward,
        Column::Backward => r.p_backward,
        Column::Smoothed => r.p_smoothed,
    })?)
}

/// Parses arguments and runs the selected command.
pub fn run_from_args<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return Ok(());
            }
            return Err(CliError::Config(e.to_string()));
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(s) = cli.common.seed {
        cfg.seed = Some(s);
    }
    if cfg.seed.is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a seed")))?;
            cfg.seed = Some(s);
        }
    }
    if let Some(w) = cli.common.workers {
        cfg.workers = Some(w);
    }
    let seed = cfg.seed.unwrap_or(0);
    cfg.seed = Some(seed);
    let workers = cfg.workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| dispatch(cli.command, cfg))
}

fn dispatch(command: Command, mut cfg: RunConfig) -> CliResult<()> {
    let seed = cfg.seed.expect("seed resolved");
    match command {
        Command::Simulate { out, traces } => {
            check_output(&out)?;
            cfg.sim.seed = seed;
            cfg.sim.validate()?;
            let shots = generate_shots(&cfg.sim, traces)?;
            let ds = Dataset::from_shots(&cfg.sim, &shots)?;
            write_dataset(&out, &ds)?;
            finish("simulate", &cfg, &[], &[&out])
        }
        Command::Filter { data, out } => {
            check_input(&data)?;
            check_output(&out)?;
            let ds = load_dataset(&data)?;
            let sim = dataset_sim(&ds, &cfg);
            sim.validate()?;
            use rayon::prelude::*;
            let pairs: Vec<(PredictionSeries, PredictionSeries)> = ds
                .records
                .par_iter()
                .map(|r| {
                    let v = r.voltages_f64();
                    Ok((sme_filter(&v, r.prep, &sim)?, retro_filter(&v, Some(r.meas), &sim)?))
                })
                .collect::<qtraj::Result<_>>()?;
            let (f, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            write_rows(&out, &prediction_rows(Some(&f), Some(&b))?)?;
            cfg.sim = sim;
            finish("filter", &cfg, &[&data], &[&out])
        }
        Command::Train {
            data,
            direction,
            model_out,
            history_out,
            epochs,
            batch_size,
            hidden,
            activation,
            unknown_fraction,
            eval_fraction,
        } => {
            check_input(&data)?;
            check_output(&model_out)?;
            let history_out = history_out.unwrap_or_else(|| with_suffix(&model_out, "history.csv"));
            check_output(&history_out)?;
            let t = &mut cfg.train;
            t.seed = seed;
            t.workers = cfg.workers.unwrap_or(0);
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = hidden {
                t.hidden_size = v;
            }
            if let Some(v) = activation {
                t.activation = v;
            }
            if let Some(v) = unknown_fraction {
                t.unknown_fraction = v;
            }
            if let Some(v) = eval_fraction {
                cfg.eval_fraction = v;
            }
            cfg.train.validate()?;
            let ds = load_dataset(&data)?;
            let (train_set, eval_set) = split(&ds, cfg.eval_fraction, seed)?;
            let direction = Direction::from(direction);
            let (model, history) = train_with_progress(&train_set, &eval_set, &cfg.train, direction, |s| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  dropout {:.3}  train {:.5}  eval {:.5}",
                    s.epoch, s.learning_rate, s.dropout, s.train_loss, s.eval_loss
                )
            })?;
            write_model(&model_out, &model)?;
            write_history(&history_out, &history)?;
            finish("train", &cfg, &[&data], &[&model_out, &history_out])
        }
        Command::Predict { model, data, out, unknown } => {
            check_input(&model)?;
            check_input(&data)?;
            check_output(&out)?;
            let m = read_model(&model).map_err(|e| CliError::from(e).context(&model))?;
            let ds = load_dataset(&data)?;
            let dt = dataset_sim(&ds, &cfg).record_dt;
            let mode = if unknown { ConditionMode::Unknown } else { ConditionMode::Labeled };
            let series = predict_dataset(&m, &ds, mode, dt)?;
            let rows = match m.direction {
                Direction::Forward => prediction_rows(Some(&series), None)?,
                Direction::Backward => prediction_rows(None, Some(&series))?,
            };
            write_rows(&out, &rows)?;
            finish("predict", &cfg, &[&model, &data], &[&out])
        }
        Command::Smooth { forward, backward, out } => {
            check_input(&forward)?;
            check_input(&backward)?;
            check_output(&out)?;
            let f = column_series(&read_rows(&forward)?, Column::Forward)?;
            let b = column_series(&read_rows(&backward)?, Column::Backward)?;
            write_rows(&out, &prediction_rows(Some(&f), Some(&b))?)?;
            finish("smooth", &cfg, &[&forward, &backward], &[&out])
        }
        Command::Validate { predictions, data, out, column, delta } => {
            check_input(&predictions)?;
            check_input(&data)?;
            check_output(&out)?;
            if let Some(d) = delta {
                cfg.delta = d;
            }
            let ds = load_dataset(&data)?;
            let series = column_series(&read_rows(&predictions)?, column)?;
            let direction = if column == Column::Backward { Direction::Backward } else { Direction::Forward };
            let report = validate(&series, &ds, direction, cfg.delta)?;
            let bins = with_suffix(&out, "bins.csv");
            write_json(&out, &report)?;
            let mut w = create(&bins)?;
            write_calibration_csv(&mut w, &report)?;
            w.flush()?;
            finish("validate", &cfg, &[&predictions, &data], &[&out, &bins])
        }
        Command::Estimate { predictions, out, column } => {
            check_input(&predictions)?;
            check_output(&out)?;
            let series = column_series(&read_rows(&predictions)?, column)?;
            let (params, drift, diffusion) = estimate(&series, cfg.grid)?;
            let (dpath, vpath) = (with_suffix(&out, "drift.csv"), with_suffix(&out, "diffusion.csv"));
            write_json(&out, &params)?;
            for (p, m) in [(&dpath, &drift), (&vpath, &diffusion)] {
                let mut w = create(p)?;
                write_map_csv(&mut w, m)?;
                w.flush()?;
            }
            finish("estimate", &cfg, &[&predictions], &[&out, &dpath, &vpath])
        }
        Command::Tomography { model, data, out, resamples } => {
            check_input(&model)?;
            check_input(&data)?;
            check_output(&out)?;
            if let Some(r) = resamples {
                cfg.resamples = r;
            }
            let m = read_model(&model).map_err(|e| CliError::from(e).context(&model))?;
            if m.direction != Direction::Backward {
                return Err(CliError::Config("tomography needs a backward model".into()));
            }
            let ds = load_dataset(&data)?;
            let dt = dataset_sim(&ds, &cfg).record_dt;
            let series = predict_dataset(&m, &ds, ConditionMode::Unknown, dt)?;
            let report = tomography_report(&series, &ds, cfg.resamples, seed)?;
            write_json(&out, &report)?;
            finish("tomography", &cfg, &[&model, &data], &[&out])
        }
    }
}

fn finish(command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&Path]) -> CliResult<()> {
    let primary = outputs.first().expect("every command writes an output");
    let manifest = RunManifest {
        tool: "qtraj",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed.unwrap_or(0),
        workers: cfg.workers,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        config: cfg,
    };
    write_json(&manifest_path(primary), &manifest)
}

fn write_history(p: &Path, history: &[EpochStats]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(p)?);
    for s in history {
        w.serialize(s).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Calibration of a prediction column against the dataset's labels.
pub fn validate(
    series: &[PredictionSeries],
    ds: &Dataset,
    direction: Direction,
    delta: f64,
) -> CliResult<CalibrationReport> {
    let pairs = calibration_pairs(series, &ds.records, direction)?;
    Ok(calibrate(&pairs, delta)?)
}

pub fn estimate(
    series: &[PredictionSeries],
    grid: GridSpec,
) -> CliResult<(PhysParams, qtraj::analysis::VectorFieldMap, qtraj::analysis::VectorFieldMap)> {
    let dt = series.iter().map(|s| s.dt).find(|d| *d > 0.0).ok_or_else(|| CliError::Config("no time axis".into()))?;
    let ens = qtraj::analysis::bloch_ensemble(series);
    let drift = drift_map(&ens, dt, grid)?;
    let diffusion = diffusion_map(&ens, dt, grid)?;
    Ok((fit_params(&drift, &diffusion)?, drift, diffusion))
}

#[derive(Debug, Serialize)]
pub struct PreparationEstimate {
    pub preparation: String,
    #[serde(flatten)]
    pub result: TomographyResult,
}

/// Tomography per preparation label present in the dataset.
pub fn tomography_report(
    series: &[PredictionSeries],
    ds: &Dataset,
    resamples: usize,
    seed: u64,
) -> CliResult<Vec<PreparationEstimate>> {
    let mut out = Vec::new();
    for label in Label::all() {
        let group: Vec<PredictionSeries> =
            series.iter().zip(&ds.records).filter(|(_, r)| r.prep == label).map(|(s, _)| s.clone()).collect();
        if group.is_empty() {
            continue;
        }
        let initial = initial_predictions(&group);
        let mut result = tomography(&initial)?;
        result.ci = Some(bootstrap_ci(&initial, resamples, seed)?);
        out.push(PreparationEstimate { preparation: label_name(label), result });
    }
    if out.is_empty() {
        return Err(CliError::Config("dataset has no records".into()));
    }
    Ok(out)
}

pub fn label_name(label: Label) -> String {
    format!("{}{}", if label.outcome() { '+' } else { '-' }, label.axis())
}
