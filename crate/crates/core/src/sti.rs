//! The spatiotemporal mapping matrix.
//!
//! Row `l` (1-based, `1 ≤ l ≤ L`) maps a snapshot `X(t_m)` to the target value
//! `y(t_{m+l−1})`. With `M` observed time points, row `l` has `M − l + 1`
//! training pairs and its remaining `l − 1` snapshots `X(t_{M−l+2})…X(t_M)`
//! predict the future values `y(t_{M+1})…y(t_{M+l−1})`. Targets are constant
//! along anti-diagonals (Hankel structure), so neighbouring rows share pairs.
//!
//! Ranges below are 0-based, half-open column indices.

use std::ops::Range;

use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StiError {
    #[error("embedding dimension L={embedding} exceeds the {train_len} observed points (at most L−1 = M−1 steps can be predicted)")]
    EmbeddingTooLarge { embedding: usize, train_len: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    NothingToPredict(usize),
    #[error("target index {target} out of range for {n_vars} variables")]
    TargetOutOfRange { target: usize, n_vars: usize },
    #[error("train length {train_len} exceeds the {available} available time points")]
    NotEnoughData { train_len: usize, available: usize },
    #[error("dataset has missing cells")]
    Incomplete,
    #[error("row {row} out of range 1..={embedding}")]
    RowOutOfRange { row: usize, embedding: usize },
    #[error("block size must be at least 1")]
    EmptyBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StiProblem {
    target: usize,
    train_len: usize,
    embedding: usize,
    n_vars: usize,
}

impl StiProblem {
    pub fn new(n_vars: usize, target: usize, train_len: usize, embedding: usize) -> Result<Self, StiError> {
        if embedding < 2 {
            return Err(StiError::NothingToPredict(embedding));
        }
        if embedding > train_len {
            return Err(StiError::EmbeddingTooLarge { embedding, train_len });
        }
        if target >= n_vars {
            return Err(StiError::TargetOutOfRange { target, n_vars });
        }
        Ok(Self {
            target,
            train_len,
            embedding,
            n_vars,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// `M`
    pub fn train_len(&self) -> usize {
        self.train_len
    }

    /// `L`
    pub fn embedding(&self) -> usize {
        self.embedding
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// `L − 1`
    pub fn horizon(&self) -> usize {
        self.embedding - 1
    }

    /// Future columns `t_{M+1}…t_{M+L−1}`.
    pub fn future(&self) -> Range<usize> {
        self.train_len..self.train_len + self.horizon()
    }

    pub fn task(&self, row: usize) -> Result<MappingTask, StiError> {
        if row == 0 || row > self.embedding {
            return Err(StiError::RowOutOfRange {
                row,
                embedding: self.embedding,
            });
        }
        let m = self.train_len;
        Ok(MappingTask {
            row,
            train_inputs: 0..m - row + 1,
            train_targets: row - 1..m,
            predict_inputs: m - row + 1..m,
            predicted: m..m + row - 1,
        })
    }

    pub fn tasks(&self) -> Vec<MappingTask> {
        (1..=self.embedding).map(|l| self.task(l).expect("row in range")).collect()
    }

    /// Consecutive, non-overlapping blocks of `block_size` rows.
    pub fn partition(&self, block_size: usize) -> Result<Vec<TaskBlock>, StiError> {
        if block_size == 0 {
            return Err(StiError::EmptyBlock);
        }
        Ok(self
            .tasks()
            .chunks(block_size)
            .enumerate()
            .map(|(index, rows)| TaskBlock {
                index,
                rows: rows.to_vec(),
            })
            .collect())
    }
}

/// Builds the problem for `dataset`, checking that the first `train_len`
/// columns are present and complete.
pub fn build_sti(dataset: &Dataset, target: usize, train_len: usize, embedding: usize) -> Result<StiProblem, StiError> {
    let problem = StiProblem::new(dataset.n_vars(), target, train_len, embedding)?;
    if train_len > dataset.len() {
        return Err(StiError::NotEnoughData {
            train_len,
            available: dataset.len(),
        });
    }
    if dataset.missing().iter().any(|(_, t)| *t < train_len) {
        return Err(StiError::Incomplete);
    }
    Ok(problem)
}

/// One row of the mapping matrix as a regression task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTask {
    /// 1-based row index `l`.
    pub row: usize,
    /// Snapshots `X(t_1)…X(t_{M−l+1})`.
    pub train_inputs: Range<usize>,
    /// Target values `y(t_l)…y(t_M)`.
    pub train_targets: Range<usize>,
    /// Snapshots `X(t_{M−l+2})…X(t_M)`; empty for `l = 1`.
    pub predict_inputs: Range<usize>,
    /// Columns of the predicted values `y(t_{M+1})…y(t_{M+l−1})`.
    pub predicted: Range<usize>,
}

impl MappingTask {
    /// Column offset between an input snapshot and its target.
    pub fn lag(&self) -> usize {
        self.row - 1
    }

    /// `(input column, target column)` training pairs.
    pub fn train_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.train_inputs.clone().zip(self.train_targets.clone())
    }

    /// `(input column, predicted column)` pairs.
    pub fn predict_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.predict_inputs.clone().zip(self.predicted.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBlock {
    pub index: usize,
    pub rows: Vec<MappingTask>,
}
