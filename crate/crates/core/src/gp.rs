//! Single-task Gaussian-process regression with an RBF kernel.
//!
//! Hyperparameters are optimized in the log domain by maximizing the log
//! marginal likelihood with analytic gradients. The prior mean is zero, so
//! callers are expected to standardize their targets.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::JitteredCholesky;
use crate::optim::{self, Bounds};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("no training points")]
    Empty,
    #[error("kernel matrix is ill-conditioned: Cholesky failed after jitter escalation")]
    IllConditioned,
    #[error("all {0} optimizer restarts failed to factorize the kernel matrix")]
    AllRestartsFailed(usize),
}

/// How many length scales the RBF kernel carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LengthScaleMode {
    /// One scale shared by every input dimension.
    #[default]
    Isotropic,
    /// One scale per input dimension (ARD).
    PerDimension,
}

impl LengthScaleMode {
    pub fn count(self, dim: usize) -> usize {
        match self {
            LengthScaleMode::Isotropic => 1,
            LengthScaleMode::PerDimension => dim,
        }
    }
}

/// Θ = {σ_f², σ_n², l}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_var: f64,
    pub noise_var: f64,
    /// A single entry for the isotropic kernel, otherwise one per input dimension.
    pub length_scales: Vec<f64>,
}

impl KernelParams {
    pub fn isotropic(signal_var: f64, length_scale: f64, noise_var: f64) -> Self {
        Self {
            signal_var,
            noise_var,
            length_scales: vec![length_scale],
        }
    }

    pub fn mode(&self) -> LengthScaleMode {
        if self.length_scales.len() == 1 {
            LengthScaleMode::Isotropic
        } else {
            LengthScaleMode::PerDimension
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), GpError> {
        let finite = self.signal_var.is_finite()
            && self.noise_var.is_finite()
            && self.length_scales.iter().all(|l| l.is_finite());
        if !finite {
            return Err(GpError::InvalidParams("non-finite value".into()));
        }
        if self.signal_var <= 0.0 {
            return Err(GpError::InvalidParams("signal_var must be > 0".into()));
        }
        if self.noise_var < 0.0 {
            return Err(GpError::InvalidParams("noise_var must be >= 0".into()));
        }
        if self.length_scales.is_empty() || self.length_scales.iter().any(|l| *l <= 0.0) {
            return Err(GpError::InvalidParams("length scales must be > 0".into()));
        }
        if self.length_scales.len() != 1 && self.length_scales.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                found: self.length_scales.len(),
            });
        }
        Ok(())
    }

    /// `[ln σ_f², ln l (one or per dimension), ln σ_n²]`
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.length_scales.len() + 2);
        v.push(self.signal_var.ln());
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(log: &[f64]) -> Self {
        let n = log.len();
        Self {
            signal_var: log[0].exp(),
            noise_var: log[n - 1].exp(),
            length_scales: log[1..n - 1].iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn n_log_params(&self) -> usize {
        self.length_scales.len() + 2
    }

    /// Noise-free RBF term `σ_f²·exp(−½ Σ (x_d − x'_d)²/l_d²)`.
    pub(crate) fn rbf(&self, x: &[f64], y: &[f64]) -> f64 {
        self.rbf_from_scaled(self.scaled_sqdist(x, y))
    }

    pub(crate) fn rbf_from_scaled(&self, scaled: f64) -> f64 {
        self.signal_var * (-0.5 * scaled).exp()
    }

    pub(crate) fn scaled_sqdist(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.length_scales.len() == 1 {
            let l = self.length_scales[0];
            sqdist(x, y) / (l * l)
        } else {
            x.iter()
                .zip(y)
                .zip(&self.length_scales)
                .map(|((a, b), l)| {
                    let d = (a - b) / l;
                    d * d
                })
                .sum()
        }
    }
}

/// Bounds and budget for hyperparameter optimization.
///
/// `log_lower`/`log_upper` bound ln σ_f, ln l and ln σ_n (natural units);
/// the variance parameters therefore live in `[2·log_lower, 2·log_upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub log_lower: f64,
    pub log_upper: f64,
    pub max_run: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            log_lower: 1e-3f64.ln(),
            log_upper: 1e3f64.ln(),
            max_run: 3,
            max_iters: 200,
            grad_tol: 1e-6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.log_lower < self.log_upper) || !self.log_lower.is_finite() || !self.log_upper.is_finite() {
            return Err(GpError::InvalidConfig("log_lower must be < log_upper".into()));
        }
        if self.max_run == 0 {
            return Err(GpError::InvalidConfig("max_run must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(GpError::InvalidConfig("grad_tol must be > 0".into()));
        }
        Ok(())
    }

    pub(crate) fn kernel_bounds(&self, n_scales: usize) -> Vec<Bounds> {
        let var = Bounds::new(2.0 * self.log_lower, 2.0 * self.log_upper);
        let scale = Bounds::new(self.log_lower, self.log_upper);
        let mut b = vec![var];
        b.extend(std::iter::repeat(scale).take(n_scales));
        b.push(var);
        b
    }
}

/// One optimizer run inside a multi-restart fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub initial_log_likelihood: Option<f64>,
    pub final_log_likelihood: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub log_likelihood: f64,
    /// Zero-based index of the restart that produced the chosen parameters.
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: Vec<RestartTrace>,
}

/// A conditioned single-task GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    params: KernelParams,
    chol: JitteredCholesky,
    alpha: DVector<f64>,
    summary: Option<FitSummary>,
}

impl GpModel {
    /// Conditions a GP on `(inputs, targets)` with fixed parameters.
    /// Rows of `inputs` are training points.
    pub fn condition(
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        params: &KernelParams,
    ) -> Result<Self, GpError> {
        check_training(inputs, targets)?;
        params.validate(inputs.ncols())?;
        let k = gram(inputs, params)?;
        let chol = JitteredCholesky::new(&k).ok_or(GpError::IllConditioned)?;
        let alpha = chol.solve(targets);
        Ok(Self {
            inputs: inputs.clone(),
            targets: targets.clone(),
            params: params.clone(),
            chol,
            alpha,
            summary: None,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn cholesky(&self) -> &JitteredCholesky {
        &self.chol
    }

    pub fn summary(&self) -> Option<&FitSummary> {
        self.summary.as_ref()
    }

    /// Posterior mean and variance of the latent function at each query row.
    pub fn predict(&self, query: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>), GpError> {
        if query.ncols() != self.inputs.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: self.inputs.ncols(),
                found: query.ncols(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("query inputs"));
        }
        let n = self.inputs.nrows();
        let train_rows = rows(&self.inputs);
        let mut means = DVector::zeros(query.nrows());
        let mut vars = DVector::zeros(query.nrows());
        for (q, row) in rows(query).iter().enumerate() {
            let cross = DVector::from_fn(n, |i, _| self.params.rbf(row, &train_rows[i]));
            means[q] = cross.dot(&self.alpha);
            let v = self.chol.solve_lower(&cross);
            vars[q] = clamp_variance(self.params.signal_var - v.dot(&v));
        }
        Ok((means, vars))
    }
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Kernel value between two points; `same_index` adds the noise term.
pub fn kernel_eval(x: &[f64], y: &[f64], same_index: bool, params: &KernelParams) -> Result<f64, GpError> {
    if x.len() != y.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    params.validate(x.len())?;
    let noise = if same_index { params.noise_var } else { 0.0 };
    Ok(params.rbf(x, y) + noise)
}

/// Training covariance `K` (noise on the diagonal).
pub fn gram(inputs: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>, GpError> {
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("training inputs"));
    }
    params.validate(inputs.ncols())?;
    let geom = Geometry::new(inputs);
    let mut k = signal_matrix(&geom, params);
    for i in 0..k.nrows() {
        k[(i, i)] += params.noise_var;
    }
    Ok(k)
}

/// `log p(y | X, Θ)`.
pub fn log_marginal_likelihood(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    params: &KernelParams,
) -> Result<f64, GpError> {
    check_training(inputs, targets)?;
    let k = gram(inputs, params)?;
    Ok(GaussianTerms::new(k, targets, false)?.log_lik)
}

/// Gradient of the log marginal likelihood with respect to
/// `[ln σ_f², ln l…, ln σ_n²]`.
pub fn log_marginal_likelihood_grad(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    params: &KernelParams,
) -> Result<Vec<f64>, GpError> {
    check_training(inputs, targets)?;
    params.validate(inputs.ncols())?;
    let objective = Objective::new(inputs, targets);
    let (_, grad) = objective.eval(params)?;
    Ok(grad)
}

/// Fits Θ by multi-restart maximization of the log marginal likelihood.
pub fn fit(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    mode: LengthScaleMode,
    config: &OptimConfig,
    seed: u64,
) -> Result<GpModel, GpError> {
    check_training(inputs, targets)?;
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("training inputs"));
    }
    config.validate()?;
    let objective = Objective::new(inputs, targets);
    let n_scales = mode.count(inputs.ncols());
    let bounds = config.kernel_bounds(n_scales);
    let base = initial_log_params(inputs, targets, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (best, summary) = run_restarts(config, &bounds, &mut rng, &base, base.len(), |x| {
        let params = KernelParams::from_log(x);
        objective.eval(&params).ok().map(|(v, g)| (-v, g.iter().map(|c| -c).collect()))
    })?;

    let params = KernelParams::from_log(&best);
    let mut model = GpModel::condition(inputs, targets, &params)?;
    model.summary = Some(summary);
    Ok(model)
}

/// Runs `max_run` optimizations of `neg_objective` from `base` (first run) and
/// copies whose first `n_perturbed` entries are log-uniformly perturbed,
/// returning the best point.
pub(crate) fn run_restarts<F>(
    config: &OptimConfig,
    bounds: &[Bounds],
    rng: &mut ChaCha8Rng,
    base: &[f64],
    n_perturbed: usize,
    mut neg_objective: F,
) -> Result<(Vec<f64>, FitSummary), GpError>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    let mut traces = Vec::with_capacity(config.max_run);
    for run in 0..config.max_run {
        let mut start = base.to_vec();
        if run > 0 {
            perturb_kernel_params(rng, &mut start[..n_perturbed]);
        }
        let start: Vec<f64> = start.iter().zip(bounds).map(|(v, b)| b.clamp(*v)).collect();
        let initial = neg_objective(&start).map(|(v, _)| -v);
        let result = optim::minimize(&mut neg_objective, &start, bounds, config.max_iters, config.grad_tol);
        match result {
            Some(m) => {
                let ll = -m.value;
                traces.push(RestartTrace {
                    initial_log_likelihood: initial,
                    final_log_likelihood: Some(ll),
                    iterations: m.iterations,
                    converged: m.converged,
                });
                if best.as_ref().map_or(true, |(_, b, _)| ll > *b) {
                    best = Some((m.x, ll, run));
                }
            }
            None => traces.push(RestartTrace {
                initial_log_likelihood: initial,
                final_log_likelihood: None,
                iterations: 0,
                converged: false,
            }),
        }
    }
    let (x, ll, run) = best.ok_or(GpError::AllRestartsFailed(config.max_run))?;
    let summary = FitSummary {
        log_likelihood: ll,
        restart: run,
        iterations: traces[run].iterations,
        converged: traces[run].converged,
        restarts: traces,
    };
    Ok((x, summary))
}

/// Multiplies each parameter by a factor drawn log-uniformly from `[1/4, 4]`.
fn perturb_kernel_params(rng: &mut ChaCha8Rng, log_params: &mut [f64]) {
    let ln4 = 4f64.ln();
    for v in log_params.iter_mut() {
        *v += rng.gen_range(-ln4..ln4);
    }
}

/// Heuristic starting point: σ_f² = var(y), l = median pairwise distance,
/// σ_n² = 0.01·var(y).
pub(crate) fn initial_log_params(inputs: &DMatrix<f64>, targets: &DVector<f64>, mode: LengthScaleMode) -> Vec<f64> {
    let var = population_variance(targets.as_slice());
    let scale = median_pairwise_distance(inputs);
    let n_scales = mode.count(inputs.ncols());
    let mut v = vec![var.ln()];
    v.extend(std::iter::repeat(scale.ln()).take(n_scales));
    v.push((0.01 * var).ln());
    v
}

pub(crate) fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn median_pairwise_distance(inputs: &DMatrix<f64>) -> f64 {
    let pts = rows(inputs);
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sqdist(&pts[i], &pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

fn check_training(inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<(), GpError> {
    if inputs.nrows() == 0 {
        return Err(GpError::Empty);
    }
    if inputs.nrows() != targets.len() {
        return Err(GpError::DimensionMismatch {
            expected: inputs.nrows(),
            found: targets.len(),
        });
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("training targets"));
    }
    Ok(())
}

pub(crate) fn sqdist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Pairwise structure of a fixed training set, reused across likelihood
/// evaluations.
pub(crate) struct Geometry {
    points: Vec<Vec<f64>>,
    sqdist: DMatrix<f64>,
}

impl Geometry {
    pub(crate) fn new(inputs: &DMatrix<f64>) -> Self {
        let points = rows(inputs);
        let n = points.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = sqdist(&points[i], &points[j]);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        Self { points, sqdist: d }
    }

    pub(crate) fn len(&self) -> usize {
        self.points.len()
    }

    fn scaled(&self, i: usize, j: usize, params: &KernelParams) -> f64 {
        if params.length_scales.len() == 1 {
            let l = params.length_scales[0];
            self.sqdist[(i, j)] / (l * l)
        } else {
            params.scaled_sqdist(&self.points[i], &self.points[j])
        }
    }
}

/// Noise-free `σ_f²·exp(…)` matrix over a training set.
pub(crate) fn signal_matrix(geom: &Geometry, params: &KernelParams) -> DMatrix<f64> {
    let n = geom.len();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = params.signal_var;
        for j in 0..i {
            let v = params.rbf_from_scaled(geom.scaled(i, j, params));
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Gradient of the log-likelihood with respect to the kernel's log-parameters,
/// given `W = ααᵀ − Σ⁻¹` and the signal part `S` of `Σ` (which may already
/// carry task-covariance factors).
pub(crate) fn kernel_gradient(w: &DMatrix<f64>, s: &DMatrix<f64>, geom: &Geometry, params: &KernelParams) -> Vec<f64> {
    let n = geom.len();
    let mut grad = vec![0.0; params.n_log_params()];
    let mut g_signal = 0.0;
    for j in 0..n {
        for i in 0..n {
            g_signal += w[(i, j)] * s[(i, j)];
        }
    }
    grad[0] = 0.5 * g_signal;
    if params.length_scales.len() == 1 {
        let l = params.length_scales[0];
        let inv = 1.0 / (l * l);
        let mut acc = 0.0;
        for j in 0..n {
            for i in 0..n {
                acc += w[(i, j)] * s[(i, j)] * geom.sqdist[(i, j)] * inv;
            }
        }
        grad[1] = 0.5 * acc;
    } else {
        for (d, l) in params.length_scales.iter().enumerate() {
            let inv = 1.0 / (l * l);
            let mut acc = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let diff = geom.points[i][d] - geom.points[j][d];
                    acc += w[(i, j)] * s[(i, j)] * diff * diff * inv;
                }
            }
            grad[1 + d] = 0.5 * acc;
        }
    }
    let last = grad.len() - 1;
    grad[last] = 0.5 * params.noise_var * w.trace();
    grad
}

/// `log p(y)` for a zero-mean Gaussian with covariance `Σ`.
pub(crate) struct GaussianTerms {
    pub(crate) log_lik: f64,
    /// `ααᵀ − Σ⁻¹` when requested.
    pub(crate) w: Option<DMatrix<f64>>,
}

impl GaussianTerms {
    pub(crate) fn new(cov: DMatrix<f64>, y: &DVector<f64>, with_w: bool) -> Result<Self, GpError> {
        let chol = JitteredCholesky::new(&cov).ok_or(GpError::IllConditioned)?;
        let alpha = chol.solve(y);
        let n = y.len() as f64;
        let log_lik = -0.5 * y.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * LN_2PI;
        if !log_lik.is_finite() {
            return Err(GpError::IllConditioned);
        }
        let w = with_w.then(|| {
            let mut w = chol.inverse();
            w.neg_mut();
            w.ger(1.0, &alpha, &alpha, 1.0);
            w
        });
        Ok(Self { log_lik, w })
    }
}

/// Log-likelihood and gradient for a fixed training set.
struct Objective<'a> {
    geom: Geometry,
    targets: &'a DVector<f64>,
}

impl<'a> Objective<'a> {
    fn new(inputs: &DMatrix<f64>, targets: &'a DVector<f64>) -> Self {
        Self {
            geom: Geometry::new(inputs),
            targets,
        }
    }

    fn eval(&self, params: &KernelParams) -> Result<(f64, Vec<f64>), GpError> {
        let s = signal_matrix(&self.geom, params);
        let mut k = s.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += params.noise_var;
        }
        let terms = GaussianTerms::new(k, self.targets, true)?;
        let w = terms.w.as_ref().expect("requested");
        Ok((terms.log_lik, kernel_gradient(w, &s, &self.geom, params)))
    }
}
