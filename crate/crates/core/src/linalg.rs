//! Cholesky factorization with diagonal jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative jitter levels tried after the plain factorization fails, as a
/// multiple of the mean diagonal.
const JITTER_LADDER: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Cholesky factor of `K + jitter·I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl JitteredCholesky {
    /// Factorizes `k`, adding diagonal jitter only when the plain factorization
    /// fails. Returns `None` when the ladder is exhausted or `k` is not finite.
    pub fn new(k: &DMatrix<f64>) -> Option<Self> {
        if k.nrows() == 0 || k.nrows() != k.ncols() || k.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if let Some(factor) = Cholesky::new(k.clone()) {
            if factor_is_finite(&factor) {
                return Some(Self { factor, jitter: 0.0 });
            }
        }
        let mean_diag = k.diagonal().mean();
        if !(mean_diag > 0.0) {
            return None;
        }
        for rel in JITTER_LADDER {
            let jitter = rel * mean_diag;
            let mut jittered = k.clone();
            for i in 0..jittered.nrows() {
                jittered[(i, i)] += jitter;
            }
            if let Some(factor) = Cholesky::new(jittered) {
                if factor_is_finite(&factor) {
                    return Some(Self { factor, jitter });
                }
            }
        }
        None
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = K + jitter·I`.
    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// Solves `L·x = b` for the lower factor only.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = self.factor.l_dirty();
        let n = b.len();
        let mut x = b.clone();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= l[(i, j)] * x[j];
            }
            x[i] = acc / l[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// `log|K + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

fn factor_is_finite(factor: &Cholesky<f64, Dyn>) -> bool {
    let l = factor.l_dirty();
    (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0)
}
