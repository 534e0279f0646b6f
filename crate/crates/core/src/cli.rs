//! The `sti-forecast` command line.
//!
//! Four subcommands: `generate` writes a synthetic dataset, `predict` runs the
//! forecaster and writes a forecast JSON, `evaluate` scores a forecast against
//! held-out truth, and `report` emits plot-ready CSV. Every output file is
//! written atomically and only after the whole command has succeeded.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DataError, Dataset, SystemKind, SystemSpec};
use crate::eval::{self, MetricReport};
use crate::forecaster::{self, ForecastConfig, ForecastError, ForecastStep};
use crate::gp::{LengthScaleMode, OptimConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "sti-forecast", version, about = "Multi-step forecasting of short high-dimensional time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a coupled Lorenz or pendulum system and write it as CSV.
    Generate(GenerateArgs),
    /// Forecast one target variable and write the forecast JSON.
    Predict(PredictArgs),
    /// Score a forecast against held-out truth, next to two naive baselines.
    Evaluate(EvaluateArgs),
    /// Write plot data: one row per time point with truth, forecast and spread.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemArg {
    Lorenz,
    Pendulum,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "lorenz")]
    pub system: SystemArg,
    /// Number of coupled units (3 variables each for Lorenz, 2 for pendulums).
    #[arg(long, default_value_t = 30)]
    pub units: usize,
    /// Recorded time points.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Integration steps per recorded sample.
    #[arg(long, default_value_t = 5)]
    pub sample_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub coupling: f64,
    /// Parameter drift per recorded sample.
    #[arg(long, default_value_t = 0.02)]
    pub drift_rate: f64,
    /// Integration steps discarded before recording.
    #[arg(long, default_value_t = 2000)]
    pub transient: usize,
    /// Standard deviation of i.i.d. Gaussian observation noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Column name, or 0-based variable index when no column has that name.
    #[arg(long)]
    pub target: String,
    /// Number of observed time points used for training (M).
    #[arg(long)]
    pub train_len: usize,
    /// Steps to forecast; the embedding dimension is horizon + 1.
    #[arg(long)]
    pub horizon: usize,
    /// Mapping rows fitted jointly per block; 1 fits every row on its own.
    #[arg(long, default_value_t = 5)]
    pub ntask: usize,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Centered moving-average window applied to the training window.
    #[arg(long, default_value_t = 1)]
    pub smooth_window: usize,
    /// One length scale per input variable.
    #[arg(long)]
    pub ard: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub forecast: PathBuf,
    /// CSV holding either the forecast window only or the full series.
    #[arg(long)]
    pub truth: PathBuf,
    /// Optional metrics JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub forecast: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub version: String,
    /// SHA-256 of the dataset file, hex encoded.
    pub dataset_digest: String,
    /// Absent from manifests embedded in outputs so reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
    pub blocks: Vec<BlockFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub index: usize,
    pub rows: Vec<usize>,
    /// Final log marginal likelihood of the chosen restart.
    pub nlml: f64,
    pub iterations: usize,
    pub restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LengthScale {
    Shared(f64),
    PerDimension(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub signal_var: f64,
    pub length_scale: LengthScale,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub rows: Vec<usize>,
    pub nlml: f64,
    pub restart: usize,
    pub theta: Theta,
    pub coreg_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub row_l: usize,
    pub t: usize,
    pub mean: f64,
    pub variance: f64,
}

/// On-disk forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastFile {
    pub schema: u32,
    pub target: String,
    pub target_index: usize,
    pub train_len: usize,
    pub horizon: usize,
    pub steps: Vec<ForecastStep>,
    pub raw: Vec<RawRecord>,
    pub blocks: Vec<BlockRecord>,
    /// Training values of the target, after any smoothing.
    pub history: Vec<f64>,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub target: String,
    pub horizon: usize,
    pub method: String,
    pub forecast: MetricReport,
    pub persistence: MetricReport,
    pub drift: MetricReport,
}

/// A failed command and its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or inconsistent inputs: exit 2.
    Usage(String),
    /// The numerics gave up: exit 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::IntegrationFailure { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Block { .. } | ForecastError::Aggregate(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let kind = match args.system {
        SystemArg::Lorenz => SystemKind::Lorenz,
        SystemArg::Pendulum => SystemKind::Pendulum,
    };
    let spec = SystemSpec {
        kind,
        n_units: args.units,
        dt: args.dt,
        sample_every: args.sample_every,
        coupling: args.coupling,
        drift_rate: args.drift_rate,
        transient: args.transient,
        samples: args.steps,
        seed: args.seed,
    };
    let clean = data::generate(&spec)?;
    // Noise draws use a stream distinct from the initial-condition stream.
    let noisy = data::add_noise(&clean, args.noise_std, args.seed ^ 0x6e6f_6973_65)?;
    let csv = data::to_csv(&noisy);
    let mut manifest = manifest("generate", args, args.seed, sha256_hex(csv.as_bytes()), Vec::new())?;
    manifest.duration_secs = Some(started.elapsed().as_secs_f64());
    let sidecar = to_json(&manifest)?;
    write_all(&[(args.out.clone(), csv.into_bytes()), (sidecar_path(&args.out), sidecar)])
}

/// Loads, resolves the target and applies preprocessing to the training
/// window. Later columns are dropped before anything looks at them.
fn prepare(args: &PredictArgs) -> Result<(Dataset, usize, Vec<u8>), CliError> {
    let bytes = std::fs::read(&args.data).map_err(|e| usage(format!("cannot read {}: {e}", args.data.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| usage(format!("{} is not UTF-8", args.data.display())))?;
    let full = data::parse_csv(text)?;
    let target = resolve_target(&full, &args.target)?;
    if args.train_len > full.len() {
        return Err(usage(format!(
            "--train-len {} exceeds the {} rows in {}",
            args.train_len,
            full.len(),
            args.data.display()
        )));
    }
    let mut window = full.head(args.train_len)?;
    if !window.is_complete() {
        window = data::impute(&window)?;
    }
    let window = data::smooth(&window, args.smooth_window)?;
    Ok((window, target, bytes))
}

fn resolve_target(dataset: &Dataset, target: &str) -> Result<usize, CliError> {
    if let Some(i) = dataset.var_index(target) {
        return Ok(i);
    }
    match target.parse::<usize>() {
        Ok(i) if i < dataset.n_vars() => Ok(i),
        _ => Err(usage(format!(
            "unknown target '{target}': no such column and not an index below {}",
            dataset.n_vars()
        ))),
    }
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if args.horizon == 0 {
        return Err(usage("--horizon must be at least 1"));
    }
    let (window, target, bytes) = prepare(args)?;
    let config = ForecastConfig {
        target,
        train_len: args.train_len,
        embedding: args.horizon + 1,
        tasks_per_block: args.ntask,
        optim: OptimConfig {
            max_run: args.restarts,
            ..OptimConfig::default()
        },
        seed: args.seed,
        length_scales: if args.ard {
            LengthScaleMode::PerDimension
        } else {
            LengthScaleMode::Isotropic
        },
    };
    let forecast = forecaster::run(&window, &config)?;

    let fits = forecast
        .blocks
        .iter()
        .map(|b| BlockFit {
            index: b.index,
            rows: b.rows.clone(),
            nlml: b.fit.log_likelihood,
            iterations: b.fit.iterations,
            restart: b.fit.restart,
        })
        .collect();
    let manifest = manifest("predict", args, args.seed, sha256_hex(&bytes), fits)?;
    let file = ForecastFile {
        schema: SCHEMA_VERSION,
        target: window.names()[target].clone(),
        target_index: target,
        train_len: forecast.train_len,
        horizon: forecast.horizon,
        steps: forecast.steps.clone(),
        raw: forecast
            .raw
            .iter()
            .map(|r| RawRecord {
                row_l: r.row,
                t: r.t,
                mean: r.mean,
                variance: r.variance,
            })
            .collect(),
        blocks: forecast
            .blocks
            .iter()
            .map(|b| BlockRecord {
                rows: b.rows.clone(),
                nlml: b.fit.log_likelihood,
                restart: b.fit.restart,
                theta: Theta {
                    signal_var: b.params.signal_var,
                    length_scale: match b.params.length_scales.as_slice() {
                        [l] => LengthScale::Shared(*l),
                        many => LengthScale::PerDimension(many.to_vec()),
                    },
                    noise_var: b.params.noise_var,
                },
                coreg_diag: b.coreg_diag.clone(),
            })
            .collect(),
        history: forecast.history.clone(),
        manifest,
    };
    let body = to_json(&file)?;
    let mut sidecar = file.manifest;
    sidecar.duration_secs = Some(started.elapsed().as_secs_f64());
    write_all(&[(args.out.clone(), body), (sidecar_path(&args.out), to_json(&sidecar)?)])
}

fn read_forecast(path: &Path) -> Result<ForecastFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let file: ForecastFile =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a forecast file: {e}", path.display())))?;
    if file.schema != SCHEMA_VERSION {
        return Err(usage(format!("unsupported forecast schema {}", file.schema)));
    }
    if file.steps.len() != file.horizon || file.history.len() != file.train_len {
        return Err(usage(format!("{} is internally inconsistent", path.display())));
    }
    Ok(file)
}

/// The target's truth, split into the training part (when the file holds the
/// full series) and the forecast window. Cells may be `NaN`.
struct Truth {
    train: Option<Vec<f64>>,
    future: Vec<f64>,
}

fn read_truth(path: &Path, forecast: &ForecastFile) -> Result<Truth, CliError> {
    let ds = data::load_csv(path)?;
    let var = ds
        .var_index(&forecast.target)
        .or_else(|| (ds.n_vars() == 1).then_some(0))
        .ok_or_else(|| usage(format!("{} has no column '{}'", path.display(), forecast.target)))?;
    let series = ds.series(var);
    let (m, h) = (forecast.train_len, forecast.horizon);
    if series.len() == h {
        Ok(Truth {
            train: None,
            future: series,
        })
    } else if series.len() >= m + h {
        Ok(Truth {
            train: Some(series[..m].to_vec()),
            future: series[m..m + h].to_vec(),
        })
    } else {
        Err(usage(format!(
            "horizon mismatch: forecast covers {h} steps after t={m}, truth has {} rows \
             (expected {h}, or at least {} for a full series)",
            series.len(),
            m + h
        )))
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let forecast = read_forecast(&args.forecast)?;
    let truth = read_truth(&args.truth, &forecast)?;
    if truth.future.iter().any(|v| v.is_nan()) {
        return Err(usage("truth has missing values inside the forecast window"));
    }
    let predicted: Vec<f64> = forecast.steps.iter().map(|s| s.mean).collect();
    let h = forecast.horizon;
    let score = |p: &[f64]| eval::metrics(&truth.future, p).map_err(|e| usage(e.to_string()));
    let persistence = eval::baseline_persistence(&forecast.history, h).map_err(|e| usage(e.to_string()))?;
    let drift = eval::baseline_drift(&forecast.history, h).map_err(|e| usage(e.to_string()))?;
    let ntask = forecast
        .manifest
        .config
        .get("ntask")
        .and_then(|v| v.as_u64())
        .map_or_else(|| "forecast".to_owned(), |j| format!("mt-gpr(J={j})"));
    let result = EvaluationFile {
        target: forecast.target.clone(),
        horizon: h,
        method: ntask,
        forecast: score(&predicted)?,
        persistence: score(&persistence)?,
        drift: score(&drift)?,
    };

    let mut table = format!("{:<14} {:>12} {:>12} {:>8}\n", "method", "MAE", "RMSE", "PCC");
    for (name, r) in [
        (result.method.as_str(), &result.forecast),
        ("persistence", &result.persistence),
        ("drift", &result.drift),
    ] {
        let _ = writeln!(table, "{name:<14} {:>12.6} {:>12.6} {:>8}", r.mae, r.rmse, r.pcc_display());
    }
    if let Some(out) = &args.out {
        write_all(&[(out.clone(), to_json(&result)?)])?;
    }
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(table.as_bytes());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let forecast = read_forecast(&args.forecast)?;
    let truth = match &args.truth {
        Some(path) => Some(read_truth(path, &forecast)?),
        None => None,
    };
    let (m, h) = (forecast.train_len, forecast.horizon);
    let train_truth = truth.as_ref().and_then(|t| t.train.clone()).unwrap_or_else(|| forecast.history.clone());
    let cell = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };

    let mut out = String::from("t,truth,predicted,dispersion,split\n");
    for t in 1..=m + h {
        let _ = if t <= m {
            writeln!(out, "{t},{},,,train", cell(train_truth[t - 1]))
        } else {
            let step = &forecast.steps[t - m - 1];
            let truth_cell = truth.as_ref().map_or_else(String::new, |tr| cell(tr.future[t - m - 1]));
            writeln!(out, "{t},{truth_cell},{},{},forecast", step.mean, step.dispersion)
        };
    }
    write_all(&[(args.out.clone(), out.into_bytes())])
}

fn manifest<A: Serialize>(
    command: &str,
    args: &A,
    seed: u64,
    dataset_digest: String,
    blocks: Vec<BlockFit>,
) -> Result<RunManifest, CliError> {
    let config = match serde_json::to_value(args).map_err(|e| usage(e.to_string()))? {
        serde_json::Value::Object(map) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    Ok(RunManifest {
        command: command.to_owned(),
        config,
        seed,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        dataset_digest,
        duration_secs: None,
        blocks,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// `forecast.json` → `forecast.json.manifest.json`
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| usage(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Stages every file next to its destination, then renames them into place.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<(), CliError> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path)
            .map_err(|e| usage(format!("cannot write {}: {}", path.display(), e.error)))?;
    }
    Ok(())
}
