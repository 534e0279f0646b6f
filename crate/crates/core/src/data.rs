//! Datasets: synthetic generators, noise injection, preprocessing and CSV I/O.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid system parameters: {0}")]
    InvalidSpec(String),
    #[error("integration produced a non-finite state at step {step}")]
    IntegrationFailure { step: usize },
    #[error("noise standard deviation must be >= 0, got {0}")]
    NegativeNoise(f64),
    #[error("smoothing window {window} out of range 1..={len}")]
    WindowOutOfRange { window: usize, len: usize },
    #[error("dataset has missing cells; impute first")]
    MissingValues,
    #[error("variable '{0}' has no observed values")]
    Unimputable(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `N` variables observed at `T` time points.
///
/// Values are stored variable-major as an `N×T` matrix, so column `t` is the
/// snapshot `X(t)`. Missing cells hold `NaN` and are listed in `missing`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    names: Vec<String>,
    times: Vec<f64>,
    missing: BTreeSet<(usize, usize)>,
}

impl Dataset {
    /// Builds a complete dataset with time stamps `0, 1, …, T−1`.
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self, DataError> {
        let times = (0..values.ncols()).map(|t| t as f64).collect();
        Self::with_times(values, names, times)
    }

    pub fn with_times(values: DMatrix<f64>, names: Vec<String>, times: Vec<f64>) -> Result<Self, DataError> {
        let missing = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_nan())
            .map(|(k, _)| (k % values.nrows(), k / values.nrows()))
            .collect();
        let ds = Self {
            values,
            names,
            times,
            missing,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DataError> {
        let (n, t) = self.values.shape();
        if n == 0 {
            return Err(DataError::Invalid("need at least one variable".into()));
        }
        if t < 2 {
            return Err(DataError::Invalid("need at least two time points".into()));
        }
        if self.names.len() != n {
            return Err(DataError::Invalid(format!("{} names for {n} variables", self.names.len())));
        }
        if self.times.len() != t {
            return Err(DataError::Invalid(format!("{} time stamps for {t} time points", self.times.len())));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) || self.times.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("time stamps must be finite and strictly increasing".into()));
        }
        if self.values.iter().any(|v| v.is_infinite()) {
            return Err(DataError::Invalid("infinite value".into()));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn missing(&self) -> &BTreeSet<(usize, usize)> {
        &self.missing
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn value(&self, var: usize, t: usize) -> f64 {
        self.values[(var, t)]
    }

    /// The snapshot `X(t)`.
    pub fn snapshot(&self, t: usize) -> Vec<f64> {
        self.values.column(t).iter().copied().collect()
    }

    pub fn series(&self, var: usize) -> Vec<f64> {
        self.values.row(var).iter().copied().collect()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The first `len` time points.
    pub fn head(&self, len: usize) -> Result<Self, DataError> {
        if len > self.len() {
            return Err(DataError::Invalid(format!("requested {len} time points, dataset has {}", self.len())));
        }
        Self::with_times(
            self.values.columns(0, len).into_owned(),
            self.names.clone(),
            self.times[..len].to_vec(),
        )
    }

    /// Same shape, names and time stamps, new values.
    pub fn map_values(&self, values: DMatrix<f64>) -> Result<Self, DataError> {
        if values.shape() != self.values.shape() {
            return Err(DataError::Invalid("shape changed".into()));
        }
        Self::with_times(values, self.names.clone(), self.times.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Lorenz,
    Pendulum,
}

/// Parameters of a synthetic coupled system.
///
/// `drift_rate` is the change of the drifting parameter (ρ for Lorenz, the
/// damping γ for the pendulum chain) per recorded sample; the drift starts
/// once the transient has been discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n_units: usize,
    pub dt: f64,
    pub sample_every: usize,
    pub coupling: f64,
    pub drift_rate: f64,
    /// Integration steps discarded before recording.
    pub transient: usize,
    /// Recorded time points.
    pub samples: usize,
    pub seed: u64,
}

impl SystemSpec {
    pub fn lorenz(n_units: usize, samples: usize, seed: u64) -> Self {
        Self {
            kind: SystemKind::Lorenz,
            n_units,
            dt: 0.01,
            sample_every: 5,
            coupling: 0.1,
            drift_rate: 0.02,
            transient: 2000,
            samples,
            seed,
        }
    }

    pub fn pendulum(n_units: usize, samples: usize, seed: u64) -> Self {
        Self {
            kind: SystemKind::Pendulum,
            ..Self::lorenz(n_units, samples, seed)
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DataError::InvalidSpec("dt must be > 0".into()));
        }
        if self.n_units < 2 {
            return Err(DataError::InvalidSpec("need at least two units".into()));
        }
        if self.sample_every == 0 {
            return Err(DataError::InvalidSpec("sample_every must be >= 1".into()));
        }
        if self.samples < 2 {
            return Err(DataError::InvalidSpec("need at least two samples".into()));
        }
        if !self.coupling.is_finite() || !self.drift_rate.is_finite() {
            return Err(DataError::InvalidSpec("non-finite coupling or drift".into()));
        }
        Ok(())
    }

    /// Seeded initial state: `[−1, 1]` per Lorenz coordinate, angles in
    /// `[−π/2, π/2]` and zero velocities for pendulums.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            SystemKind::Lorenz => (0..3 * self.n_units).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            SystemKind::Pendulum => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                let mut s = vec![0.0; 2 * self.n_units];
                for i in 0..self.n_units {
                    s[2 * i] = rng.gen_range(-half_pi..=half_pi);
                }
                s
            }
        }
    }

    /// Time of the drift clock (in recorded samples) at integration step `step`.
    fn drift_clock(&self, step: usize) -> f64 {
        if step <= self.transient {
            0.0
        } else {
            (step - self.transient) as f64 / self.sample_every as f64
        }
    }
}

const LORENZ_SIGMA: f64 = 10.0;
const LORENZ_BETA: f64 = 8.0 / 3.0;
const LORENZ_RHO: f64 = 28.0;
const GRAVITY_OVER_LENGTH: f64 = 9.8;
const BASE_DAMPING: f64 = 0.05;

/// Ring-coupled Lorenz oscillators; variables are named `x1, y1, z1, x2, …`.
pub fn gen_lorenz(spec: &SystemSpec) -> Result<Dataset, DataError> {
    if spec.kind != SystemKind::Lorenz {
        return Err(DataError::InvalidSpec("expected a lorenz system".into()));
    }
    lorenz_from_state(spec, &spec.initial_state())
}

/// Integrates the Lorenz ring from an explicit initial state of length `3·n_units`.
pub fn lorenz_from_state(spec: &SystemSpec, initial: &[f64]) -> Result<Dataset, DataError> {
    spec.validate()?;
    let n = spec.n_units;
    if initial.len() != 3 * n {
        return Err(DataError::InvalidSpec(format!("initial state must have {} entries", 3 * n)));
    }
    let rhs = |step: usize, s: &[f64], out: &mut [f64]| {
        let rho = LORENZ_RHO + spec.drift_rate * spec.drift_clock(step);
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let (x, y, z) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            out[3 * i] = LORENZ_SIGMA * (y - x) + spec.coupling * s[3 * prev];
            out[3 * i + 1] = x * (rho - z) - y;
            out[3 * i + 2] = x * y - LORENZ_BETA * z;
        }
    };
    let names = (1..=n)
        .flat_map(|i| [format!("x{i}"), format!("y{i}"), format!("z{i}")])
        .collect();
    integrate(spec, initial, rhs, names)
}

/// Diffusively coupled damped pendulums on a ring; variables are named
/// `theta1, omega1, theta2, …`.
pub fn gen_pendulum(spec: &SystemSpec) -> Result<Dataset, DataError> {
    if spec.kind != SystemKind::Pendulum {
        return Err(DataError::InvalidSpec("expected a pendulum system".into()));
    }
    spec.validate()?;
    let n = spec.n_units;
    let rhs = |step: usize, s: &[f64], out: &mut [f64]| {
        let gamma = BASE_DAMPING + spec.drift_rate * spec.drift_clock(step);
        for i in 0..n {
            let left = s[2 * ((i + n - 1) % n)];
            let right = s[2 * ((i + 1) % n)];
            let (theta, omega) = (s[2 * i], s[2 * i + 1]);
            out[2 * i] = omega;
            out[2 * i + 1] =
                -GRAVITY_OVER_LENGTH * theta.sin() - gamma * omega + spec.coupling * (right - 2.0 * theta + left);
        }
    };
    let names = (1..=n)
        .flat_map(|i| [format!("theta{i}"), format!("omega{i}")])
        .collect();
    integrate(spec, &spec.initial_state(), rhs, names)
}

pub fn generate(spec: &SystemSpec) -> Result<Dataset, DataError> {
    match spec.kind {
        SystemKind::Lorenz => gen_lorenz(spec),
        SystemKind::Pendulum => gen_pendulum(spec),
    }
}

/// Fixed-step RK4; the drift clock is frozen within a step.
fn integrate<F>(spec: &SystemSpec, initial: &[f64], rhs: F, names: Vec<String>) -> Result<Dataset, DataError>
where
    F: Fn(usize, &[f64], &mut [f64]),
{
    let dim = initial.len();
    let dt = spec.dt;
    let mut state = initial.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut tmp = vec![0.0; dim];
    let mut values = DMatrix::zeros(dim, spec.samples);
    let total = spec.transient + (spec.samples - 1) * spec.sample_every;
    let mut recorded = 0;
    for step in 0..=total {
        if step >= spec.transient && (step - spec.transient) % spec.sample_every == 0 {
            values.column_mut(recorded).copy_from_slice(&state);
            recorded += 1;
        }
        if step == total {
            break;
        }
        rhs(step, &state, &mut k1);
        for i in 0..dim {
            tmp[i] = state[i] + 0.5 * dt * k1[i];
        }
        rhs(step, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = state[i] + 0.5 * dt * k2[i];
        }
        rhs(step, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = state[i] + dt * k3[i];
        }
        rhs(step, &tmp, &mut k4);
        for i in 0..dim {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(DataError::IntegrationFailure { step: step + 1 });
        }
    }
    debug_assert_eq!(recorded, spec.samples);
    let sample_dt = dt * spec.sample_every as f64;
    let times = (0..spec.samples).map(|k| k as f64 * sample_dt).collect();
    Dataset::with_times(values, names, times)
}

/// Adds i.i.d. `N(0, noise_std²)` noise to every observed cell.
pub fn add_noise(dataset: &Dataset, noise_std: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(DataError::NegativeNoise(noise_std));
    }
    if noise_std == 0.0 {
        return Ok(dataset.clone());
    }
    let normal = Normal::new(0.0, noise_std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = dataset.values.clone();
    for v in values.iter_mut() {
        let e = normal.sample(&mut rng);
        if !v.is_nan() {
            *v += e;
        }
    }
    dataset.map_values(values)
}

/// Centered moving average; boundary windows are truncated.
///
/// Even windows lean one sample to the right.
pub fn smooth(dataset: &Dataset, window: usize) -> Result<Dataset, DataError> {
    let t = dataset.len();
    if window == 0 || window > t {
        return Err(DataError::WindowOutOfRange { window, len: t });
    }
    if !dataset.is_complete() {
        return Err(DataError::MissingValues);
    }
    if window == 1 {
        return Ok(dataset.clone());
    }
    let left = (window - 1) / 2;
    let right = window - 1 - left;
    let src = &dataset.values;
    let values = DMatrix::from_fn(src.nrows(), t, |v, c| {
        let lo = c.saturating_sub(left);
        let hi = (c + right).min(t - 1);
        let sum: f64 = (lo..=hi).map(|k| src[(v, k)]).sum();
        sum / (hi - lo + 1) as f64
    });
    dataset.map_values(values)
}

/// Linear interpolation in time between observed neighbours; leading and
/// trailing gaps take the nearest observed value.
pub fn impute(dataset: &Dataset) -> Result<Dataset, DataError> {
    if dataset.is_complete() {
        return Ok(dataset.clone());
    }
    let mut values = dataset.values.clone();
    let times = &dataset.times;
    for var in 0..dataset.n_vars() {
        let observed: Vec<usize> = (0..dataset.len()).filter(|t| !values[(var, *t)].is_nan()).collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(DataError::Unimputable(dataset.names[var].clone()));
        };
        for t in 0..dataset.len() {
            if !values[(var, t)].is_nan() {
                continue;
            }
            values[(var, t)] = if t < first {
                values[(var, first)]
            } else if t > last {
                values[(var, last)]
            } else {
                let k = observed.partition_point(|o| *o < t);
                let (a, b) = (observed[k - 1], observed[k]);
                let w = (times[t] - times[a]) / (times[b] - times[a]);
                values[(var, a)] + w * (values[(var, b)] - values[(var, a)])
            };
        }
    }
    dataset.map_values(values)
}

/// Parses the CSV layout `t,<name1>,…,<nameN>`, one row per time point, with
/// empty fields marking missing values.
pub fn parse_csv(text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(DataError::Parse {
            line: 1,
            message: "header needs a time column and at least one variable".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let n = names.len();
    let mut times = Vec::new();
    let mut cells: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n + 1 {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        let parse = |field: &str, what: &str| -> Result<f64, DataError> {
            field.parse::<f64>().map_err(|_| DataError::Parse {
                line,
                message: format!("non-numeric {what} '{field}'"),
            })
        };
        let t = parse(&record[0], "time stamp")?;
        if let Some(prev) = times.last() {
            if !(t > *prev) {
                return Err(DataError::Parse {
                    line,
                    message: "time column must be strictly increasing".into(),
                });
            }
        }
        times.push(t);
        for field in record.iter().skip(1) {
            cells.push(if field.is_empty() { f64::NAN } else { parse(field, "value")? });
        }
    }
    let t = times.len();
    let values = DMatrix::from_fn(n, t, |v, c| cells[c * n + v]);
    Dataset::with_times(values, names, times)
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Renders the dataset in the layout read by [`parse_csv`]. Floats use the
/// shortest representation that round-trips exactly.
pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    out.push('t');
    for name in &dataset.names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..dataset.len() {
        let _ = write!(out, "{}", dataset.times[t]);
        for v in 0..dataset.n_vars() {
            out.push(',');
            let x = dataset.values[(v, t)];
            if !x.is_nan() {
                let _ = write!(out, "{x}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_csv(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(series: &[f64]) -> Dataset {
        Dataset::new(DMatrix::from_row_slice(1, series.len(), series), vec!["a".into()]).unwrap()
    }

    #[test]
    fn lorenz_shape_and_determinism() {
        let spec = SystemSpec::lorenz(30, 60, 42);
        let a = gen_lorenz(&spec).unwrap();
        assert_eq!(a.n_vars(), 90);
        assert_eq!(a.len(), 60);
        assert_eq!(a.names()[45], "x16");
        assert!(a.values().iter().all(|v| v.is_finite()));
        let b = gen_lorenz(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lorenz_twin_runs_diverge() {
        let spec = SystemSpec {
            transient: 0,
            ..SystemSpec::lorenz(5, 1000, 1)
        };
        let init = spec.initial_state();
        let mut perturbed = init.clone();
        perturbed[0] += 1e-8;
        let a = lorenz_from_state(&spec, &init).unwrap();
        let b = lorenz_from_state(&spec, &perturbed).unwrap();
        let max_sep = (0..a.len())
            .map(|t| {
                a.snapshot(t)
                    .iter()
                    .zip(b.snapshot(t))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(max_sep > 1.0, "separation {max_sep}");
    }

    #[test]
    fn pendulum_shape_and_determinism() {
        let spec = SystemSpec::pendulum(32, 40, 3);
        let a = gen_pendulum(&spec).unwrap();
        assert_eq!(a.n_vars(), 64);
        assert_eq!(a, gen_pendulum(&spec).unwrap());
        assert!(gen_lorenz(&spec).is_err());
    }

    #[test]
    fn uncoupled_damped_pendulum_energy_decays() {
        let spec = SystemSpec {
            coupling: 0.0,
            drift_rate: 0.0,
            transient: 0,
            ..SystemSpec::pendulum(4, 400, 9)
        };
        let ds = gen_pendulum(&spec).unwrap();
        for unit in 0..4 {
            let energy: Vec<f64> = (0..ds.len())
                .map(|t| {
                    let theta = ds.value(2 * unit, t);
                    let omega = ds.value(2 * unit + 1, t);
                    0.5 * omega * omega + GRAVITY_OVER_LENGTH * (1.0 - theta.cos())
                })
                .collect();
            assert!(energy.windows(2).all(|w| w[1] < w[0]), "unit {unit}");
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let spec = SystemSpec {
            dt: 5.0,
            transient: 0,
            ..SystemSpec::lorenz(3, 50, 0)
        };
        assert!(matches!(gen_lorenz(&spec), Err(DataError::IntegrationFailure { .. })));
    }

    #[test]
    fn noise_examples() {
        let ds = gen_lorenz(&SystemSpec::lorenz(3, 20, 0)).unwrap();
        assert_eq!(add_noise(&ds, 0.0, 1).unwrap(), ds);
        assert!(matches!(add_noise(&ds, -1.0, 1), Err(DataError::NegativeNoise(_))));

        let big = Dataset::new(DMatrix::zeros(10, 12_000), (0..10).map(|i| format!("v{i}")).collect()).unwrap();
        let noisy = add_noise(&big, 1.0, 5).unwrap();
        let n = noisy.values().len() as f64;
        let mean = noisy.values().iter().sum::<f64>() / n;
        let sd = (noisy.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0).abs() < 0.02);
    }

    #[test]
    fn smooth_examples() {
        let ds = single(&[0.0, 3.0, 0.0]);
        assert_eq!(smooth(&ds, 1).unwrap(), ds);
        assert_eq!(smooth(&ds, 3).unwrap().series(0), vec![1.5, 1.0, 1.5]);
        let c = single(&[2.5; 7]);
        assert_eq!(smooth(&c, 5).unwrap().series(0), vec![2.5; 7]);
        assert!(matches!(smooth(&ds, 4), Err(DataError::WindowOutOfRange { .. })));
        assert!(matches!(smooth(&ds, 0), Err(DataError::WindowOutOfRange { .. })));
    }

    #[test]
    fn impute_examples() {
        let ds = single(&[1.0, 2.0]);
        assert_eq!(impute(&ds).unwrap(), ds);
        let gap = single(&[1.0, f64::NAN, 3.0]);
        assert_eq!(gap.missing().len(), 1);
        let filled = impute(&gap).unwrap();
        assert_eq!(filled.series(0), vec![1.0, 2.0, 3.0]);
        assert!(filled.is_complete());
        assert_eq!(impute(&single(&[f64::NAN, 5.0, 5.0])).unwrap().series(0), vec![5.0; 3]);
        assert!(matches!(impute(&single(&[f64::NAN, f64::NAN])), Err(DataError::Unimputable(_))));
    }

    #[test]
    fn impute_uses_time_stamps() {
        let ds = Dataset::with_times(
            DMatrix::from_row_slice(1, 3, &[0.0, f64::NAN, 4.0]),
            vec!["a".into()],
            vec![0.0, 1.0, 4.0],
        )
        .unwrap();
        assert_eq!(impute(&ds).unwrap().series(0), vec![0.0, 1.0, 4.0]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_lorenz(&SystemSpec::lorenz(4, 25, 8)).unwrap();
        let back = parse_csv(&to_csv(&ds)).unwrap();
        assert_eq!(back.names(), ds.names());
        for (a, b) in back.values().iter().zip(ds.values().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(back.times(), ds.times());
    }

    #[test]
    fn csv_missing_and_errors() {
        let ds = parse_csv("t,a,b\n0,1,2\n1,,4\n2,5,6e-1\n").unwrap();
        assert_eq!(ds.missing().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(ds.value(1, 2), 0.6);

        let err = parse_csv("t,a,b\n0,1,2\n1,3\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
        let err = parse_csv("t,a\n0,1\n1,abc\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }));
        let err = parse_csv("t,a\n0,1\n0,2\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }));
    }

    proptest! {
        #[test]
        fn smooth_commutes_with_affine_maps(
            series in prop::collection::vec(-100.0f64..100.0, 3..30),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
            window in 1usize..6,
        ) {
            let window = window.min(series.len());
            let ds = single(&series);
            let mapped = single(&series.iter().map(|v| a * v + b).collect::<Vec<_>>());
            let lhs = smooth(&mapped, window).unwrap().series(0);
            let rhs: Vec<f64> = smooth(&ds, window).unwrap().series(0).iter().map(|v| a * v + b).collect();
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn preprocessing_preserves_shape(series in prop::collection::vec(prop::option::weighted(0.8, -5.0f64..5.0), 3..20)) {
            let vals: Vec<f64> = series.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            prop_assume!(vals.iter().any(|v| !v.is_nan()));
            let ds = single(&vals);
            let filled = impute(&ds).unwrap();
            prop_assert_eq!(filled.len(), ds.len());
            prop_assert!(filled.is_complete());
            prop_assert_eq!(smooth(&filled, 2).unwrap().len(), ds.len());
            prop_assert_eq!(add_noise(&filled, 0.5, 1).unwrap().len(), ds.len());
        }
    }
}
