//! Forecast-quality metrics and naive baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("length mismatch: truth has {truth} points, prediction has {predicted}")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pcc: Option<f64>,
    pub horizon: usize,
    pub per_step_abs_err: Vec<f64>,
}

impl MetricReport {
    pub fn pcc_display(&self) -> String {
        match self.pcc {
            Some(v) => format!("{v:.4}"),
            None => "n/a".to_owned(),
        }
    }
}

pub fn metrics(truth: &[f64], predicted: &[f64]) -> Result<MetricReport, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.len() < 2 {
        return Err(EvalError::TooShort {
            needed: 2,
            got: truth.len(),
        });
    }
    let n = truth.len() as f64;
    let abs: Vec<f64> = truth.iter().zip(predicted).map(|(t, p)| (t - p).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(MetricReport {
        mae,
        rmse,
        pcc: pearson(truth, predicted),
        horizon: truth.len(),
        per_step_abs_err: abs,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if a.is_empty() || constant(a) || constant(b) {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Repeats the last training value.
pub fn baseline_persistence(train: &[f64], horizon: usize) -> Result<Vec<f64>, EvalError> {
    let last = *train.last().ok_or(EvalError::TooShort { needed: 1, got: 0 })?;
    Ok(vec![last; horizon])
}

/// Extends the line through the first and last training values.
pub fn baseline_drift(train: &[f64], horizon: usize) -> Result<Vec<f64>, EvalError> {
    if train.len() < 2 {
        return Err(EvalError::TooShort {
            needed: 2,
            got: train.len(),
        });
    }
    let last = train[train.len() - 1];
    let slope = (last - train[0]) / (train.len() - 1) as f64;
    Ok((1..=horizon).map(|h| last + slope * h as f64).collect())
}
