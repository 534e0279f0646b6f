//! End-to-end multi-step forecasting.
//!
//! The first `M` columns are standardized, the mapping matrix is split into
//! blocks of `J` consecutive rows, each block is fitted as one multi-task GP,
//! and every row predicts its share of the future. The prediction for step `k`
//! is the plain average over the `L − k` rows that reach it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::gp::{FitSummary, GpError, KernelParams, LengthScaleMode, OptimConfig};
use crate::mtgp::{mt_fit, StackedData};
use crate::sti::{build_sti, StiError, TaskBlock};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sti(#[from] StiError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("block {block} failed: {source}")]
    Block {
        block: usize,
        #[source]
        source: GpError,
    },
    #[error("inconsistent prediction table: {0}")]
    Aggregate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub target: usize,
    /// `M`
    pub train_len: usize,
    /// `L`; the forecast covers `L − 1` steps.
    pub embedding: usize,
    /// `J`
    pub tasks_per_block: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub length_scales: LengthScaleMode,
}

impl ForecastConfig {
    pub fn new(target: usize, train_len: usize, horizon: usize) -> Self {
        Self {
            target,
            train_len,
            embedding: horizon + 1,
            tasks_per_block: 5,
            optim: OptimConfig::default(),
            seed: 0,
            length_scales: LengthScaleMode::Isotropic,
        }
    }

    pub fn horizon(&self) -> usize {
        self.embedding.saturating_sub(1)
    }

    fn validate(&self) -> Result<(), ForecastError> {
        if self.tasks_per_block == 0 {
            return Err(ForecastError::InvalidConfig("tasks per block must be >= 1".into()));
        }
        self.optim
            .validate()
            .map_err(|e| ForecastError::InvalidConfig(e.to_string()))
    }
}

/// z-scores computed on the training window only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_means: Vec<f64>,
    pub input_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Variables with zero variance over the window (their std is set to 1).
    pub degenerate: Vec<usize>,
}

impl Standardizer {
    pub fn fit(window: &Dataset, target: usize) -> Self {
        let mut means = Vec::with_capacity(window.n_vars());
        let mut stds = Vec::with_capacity(window.n_vars());
        let mut degenerate = Vec::new();
        for v in 0..window.n_vars() {
            let (m, s) = mean_std(&window.series(v));
            means.push(m);
            if s > 0.0 && s.is_finite() {
                stds.push(s);
            } else {
                stds.push(1.0);
                degenerate.push(v);
            }
        }
        Self {
            target_mean: means[target],
            target_std: stds[target],
            input_means: means,
            input_stds: stds,
            degenerate,
        }
    }

    /// Standardized snapshots as rows (`T×N`).
    pub fn inputs(&self, window: &Dataset) -> DMatrix<f64> {
        DMatrix::from_fn(window.len(), window.n_vars(), |t, v| {
            (window.value(v, t) - self.input_means[v]) / self.input_stds[v]
        })
    }

    pub fn target(&self, series: &[f64]) -> Vec<f64> {
        series.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn restore_mean(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn restore_variance(&self, z: f64) -> f64 {
        z * self.target_std * self.target_std
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row's prediction of one future point, in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    /// 1-based mapping row `l`.
    pub row: usize,
    /// 1-based time index `t_{M+k}`.
    pub t: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastStep {
    /// 1-based time index `t_{M+k}`.
    pub t: usize,
    pub mean: f64,
    /// Population std of the contributing rows' means.
    pub dispersion: f64,
    /// Average of the contributing rows' predictive variances.
    pub mean_variance: f64,
    pub contributors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub index: usize,
    /// 1-based mapping rows in this block.
    pub rows: Vec<usize>,
    pub params: KernelParams,
    /// Diagonal of `K^f`.
    pub coreg_diag: Vec<f64>,
    pub fit: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub target: usize,
    pub train_len: usize,
    pub horizon: usize,
    pub steps: Vec<ForecastStep>,
    pub raw: Vec<RawPrediction>,
    pub blocks: Vec<BlockSummary>,
    /// Observed target values `y(t_1)…y(t_M)`.
    pub history: Vec<f64>,
    pub standardizer: Standardizer,
}

impl Forecast {
    pub fn means(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mean).collect()
    }
}

/// Runs the blocked multi-task pipeline. Only the first `train_len` columns
/// of `dataset` are read.
pub fn run(dataset: &Dataset, config: &ForecastConfig) -> Result<Forecast, ForecastError> {
    config.validate()?;
    let problem = build_sti(dataset, config.target, config.train_len, config.embedding)?;
    let window = dataset.head(config.train_len)?;
    let standardizer = Standardizer::fit(&window, config.target);
    let inputs = standardizer.inputs(&window);
    let history = window.series(config.target);
    let targets = standardizer.target(&history);

    let blocks = problem.partition(config.tasks_per_block)?;
    let fitted: Vec<_> = blocks
        .par_iter()
        .map(|block| fit_block(block, &inputs, &targets, config))
        .collect();

    let mut raw = Vec::with_capacity(problem.embedding() * problem.horizon() / 2);
    let mut summaries = Vec::with_capacity(blocks.len());
    for result in fitted {
        let (summary, predictions) = result?;
        summaries.push(summary);
        raw.extend(predictions.into_iter().map(|p| RawPrediction {
            mean: standardizer.restore_mean(p.mean),
            variance: standardizer.restore_variance(p.variance),
            ..p
        }));
    }
    raw.sort_by_key(|p| (p.row, p.t));
    let steps = aggregate(&raw, config.train_len, config.embedding)?;

    Ok(Forecast {
        target: config.target,
        train_len: config.train_len,
        horizon: problem.horizon(),
        steps,
        raw,
        blocks: summaries,
        history,
        standardizer,
    })
}

/// The single-task ablation: every row is fitted on its own.
pub fn single_task_run(dataset: &Dataset, config: &ForecastConfig) -> Result<Forecast, ForecastError> {
    let config = ForecastConfig {
        tasks_per_block: 1,
        ..config.clone()
    };
    run(dataset, &config)
}

fn block_seed(seed: u64, block: usize) -> u64 {
    seed.wrapping_add((block as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Fits one block and returns its rows' predictions in standardized units.
fn fit_block(
    block: &TaskBlock,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    config: &ForecastConfig,
) -> Result<(BlockSummary, Vec<RawPrediction>), ForecastError> {
    let wrap = |source| ForecastError::Block {
        block: block.index,
        source,
    };
    let mut pts = Vec::new();
    let mut tasks = Vec::new();
    let mut ys = Vec::new();
    for (task, row) in block.rows.iter().enumerate() {
        for (input, output) in row.train_pairs() {
            pts.push(input);
            tasks.push(task);
            ys.push(targets[output]);
        }
    }
    let stacked_inputs = DMatrix::from_fn(pts.len(), inputs.ncols(), |r, c| inputs[(pts[r], c)]);
    let data = StackedData::new(stacked_inputs, tasks, DVector::from_vec(ys), block.rows.len()).map_err(wrap)?;
    let model = mt_fit(
        &data,
        config.length_scales,
        &config.optim,
        block_seed(config.seed, block.index),
    )
    .map_err(wrap)?;

    let mut predictions = Vec::new();
    for (task, row) in block.rows.iter().enumerate() {
        if row.predict_inputs.is_empty() {
            continue;
        }
        let query = DMatrix::from_fn(row.predict_inputs.len(), inputs.ncols(), |r, c| {
            inputs[(row.predict_inputs.start + r, c)]
        });
        let (means, vars) = model.predict(task, &query).map_err(wrap)?;
        for (k, (_, out)) in row.predict_pairs().enumerate() {
            predictions.push(RawPrediction {
                row: row.row,
                t: out + 1,
                mean: means[k],
                variance: vars[k],
            });
        }
    }
    let kf = model.coreg().covariance();
    let summary = BlockSummary {
        index: block.index,
        rows: block.rows.iter().map(|r| r.row).collect(),
        params: model.params().clone(),
        coreg_diag: kf.diagonal().iter().copied().collect(),
        fit: model.summary().cloned().expect("fitted model carries a summary"),
    };
    Ok((summary, predictions))
}

/// Averages the per-row predictions of each future step.
///
/// `raw` must contain, for every row `l ∈ [2, L]`, exactly one entry for each
/// of `t_{M+1}…t_{M+l−1}`.
pub fn aggregate(raw: &[RawPrediction], train_len: usize, embedding: usize) -> Result<Vec<ForecastStep>, ForecastError> {
    let mut steps = Vec::with_capacity(embedding.saturating_sub(1));
    for k in 1..embedding {
        let t = train_len + k;
        let mut contributing: Vec<&RawPrediction> = raw.iter().filter(|p| p.t == t).collect();
        contributing.sort_by_key(|p| p.row);
        let rows: Vec<usize> = contributing.iter().map(|p| p.row).collect();
        if rows != (k + 1..=embedding).collect::<Vec<_>>() {
            return Err(ForecastError::Aggregate(format!(
                "step {k} (t={t}) has contributions from rows {rows:?}, expected rows {}..={embedding}",
                k + 1
            )));
        }
        let n = contributing.len() as f64;
        let means: Vec<f64> = contributing.iter().map(|p| p.mean).collect();
        let (mean, dispersion) = mean_std(&means);
        let mean_variance = contributing.iter().map(|p| p.variance).sum::<f64>() / n;
        steps.push(ForecastStep {
            t,
            mean,
            dispersion,
            mean_variance,
            contributors: contributing.len(),
        });
    }
    if raw.len() != embedding * (embedding - 1) / 2 {
        return Err(ForecastError::Aggregate(format!(
            "expected {} predictions, found {}",
            embedding * (embedding - 1) / 2,
            raw.len()
        )));
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_lorenz, SystemSpec};

    fn raw(row: usize, t: usize, mean: f64) -> RawPrediction {
        RawPrediction {
            row,
            t,
            mean,
            variance: 0.5,
        }
    }

    #[test]
    fn aggregate_examples() {
        // M = 10, L = 3: row 2 predicts t=11, row 3 predicts t=11 and t=12
        let table = vec![raw(2, 11, 1.0), raw(3, 11, 3.0), raw(3, 12, 5.0)];
        let steps = aggregate(&table, 10, 3).unwrap();
        assert_eq!(steps[0].mean, 2.0);
        assert_eq!(steps[0].dispersion, 1.0);
        assert_eq!(steps[0].contributors, 2);
        assert_eq!(steps[1].mean, 5.0);
        assert_eq!(steps[1].dispersion, 0.0);
        assert_eq!(steps[1].mean_variance, 0.5);
    }

    #[test]
    fn aggregate_detects_missing_contributor() {
        let table = vec![raw(2, 11, 1.0), raw(3, 12, 5.0)];
        assert!(matches!(aggregate(&table, 10, 3), Err(ForecastError::Aggregate(_))));
    }

    #[test]
    fn contributor_counts_follow_l_minus_k() {
        let (m, l) = (30, 26);
        let table: Vec<RawPrediction> = (2..=l)
            .flat_map(|row| (1..row).map(move |k| raw(row, m + k, k as f64)))
            .collect();
        let steps = aggregate(&table, m, l).unwrap();
        let counts: Vec<usize> = steps.iter().map(|s| s.contributors).collect();
        assert_eq!(counts, (1..l).rev().collect::<Vec<_>>());
    }

    fn small_lorenz() -> Dataset {
        gen_lorenz(&SystemSpec::lorenz(4, 20, 3)).unwrap()
    }

    #[test]
    fn smallest_problem_completes() {
        let ds = small_lorenz();
        let cfg = ForecastConfig::new(0, 4, 2);
        let f = single_task_run(&ds, &cfg).unwrap();
        assert_eq!(f.steps.len(), 2);
        assert_eq!(f.raw.len(), 3);
        assert!(f.means().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_task_run_equals_run_with_one_task() {
        let ds = small_lorenz();
        let mut cfg = ForecastConfig::new(1, 12, 5);
        cfg.seed = 4;
        let a = single_task_run(&ds, &cfg).unwrap();
        cfg.tasks_per_block = 1;
        assert_eq!(a, run(&ds, &cfg).unwrap());
    }

    #[test]
    fn block_sizes_one_and_l_both_complete() {
        let ds = small_lorenz();
        let mut cfg = ForecastConfig::new(2, 10, 6);
        for j in [1, cfg.embedding] {
            cfg.tasks_per_block = j;
            let f = run(&ds, &cfg).unwrap();
            assert_eq!(f.steps.len(), 6);
            assert_eq!(f.raw.len(), 21);
        }
    }

    #[test]
    fn constant_target_is_forecast_exactly() {
        let mut values = small_lorenz().values().clone();
        values.row_mut(0).fill(4.25);
        let ds = small_lorenz().map_values(values).unwrap();
        let cfg = ForecastConfig::new(0, 12, 6);
        let f = run(&ds, &cfg).unwrap();
        assert!(f.standardizer.degenerate.contains(&0));
        for s in &f.steps {
            assert!((s.mean - 4.25).abs() < 1e-6);
        }
    }

    #[test]
    fn config_errors() {
        let ds = small_lorenz();
        let mut cfg = ForecastConfig::new(0, 5, 5);
        assert!(matches!(run(&ds, &cfg), Err(ForecastError::Sti(StiError::EmbeddingTooLarge { .. }))));
        cfg = ForecastConfig::new(0, 5, 2);
        cfg.tasks_per_block = 0;
        assert!(matches!(run(&ds, &cfg), Err(ForecastError::InvalidConfig(_))));
        cfg = ForecastConfig::new(0, 25, 2);
        assert!(matches!(run(&ds, &cfg), Err(ForecastError::Sti(StiError::NotEnoughData { .. }))));
    }
}
