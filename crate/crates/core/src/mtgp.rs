//! Multi-task GP regression with an intrinsic coregionalization kernel.
//!
//! Every training point carries a task label. The covariance between two
//! stacked points is `K^f[a, b]·k(x, x')` plus `σ_n²` on the diagonal, which
//! equals `K^f ⊗ K + σ_n²I` when all tasks share one input grid but also
//! handles tasks with unequal training sets.
//!
//! `K^f = ΛΛᵀ` is parameterized by its lower-triangular Cholesky factor. During
//! optimization `Λ[0, 0]` is pinned to 1 so the overall scale is carried by
//! `σ_f²` alone; the remaining diagonal entries are optimized in log space.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gp::{
    self, clamp_variance, kernel_gradient, signal_matrix, FitSummary, GaussianTerms, Geometry, GpError, KernelParams,
    LengthScaleMode, OptimConfig,
};
use crate::linalg::JitteredCholesky;
use crate::optim::Bounds;

/// Lower-triangular factor `Λ` of the task covariance `K^f = ΛΛᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoregMatrix {
    factor: DMatrix<f64>,
}

impl CoregMatrix {
    pub fn identity(n_tasks: usize) -> Self {
        Self {
            factor: DMatrix::identity(n_tasks, n_tasks),
        }
    }

    pub fn from_factor(factor: DMatrix<f64>) -> Result<Self, GpError> {
        if factor.nrows() == 0 || factor.nrows() != factor.ncols() {
            return Err(GpError::InvalidParams("coregionalization factor must be square and non-empty".into()));
        }
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidParams("non-finite coregionalization factor".into()));
        }
        let n = factor.nrows();
        for i in 0..n {
            if !(factor[(i, i)] > 0.0) {
                return Err(GpError::InvalidParams("coregionalization diagonal must be > 0".into()));
            }
            for j in i + 1..n {
                if factor[(i, j)] != 0.0 {
                    return Err(GpError::InvalidParams("coregionalization factor must be lower-triangular".into()));
                }
            }
        }
        Ok(Self { factor })
    }

    /// Factorizes a positive-definite task covariance.
    pub fn from_covariance(kf: &DMatrix<f64>) -> Result<Self, GpError> {
        let chol = nalgebra::Cholesky::new(kf.clone())
            .ok_or_else(|| GpError::InvalidParams("task covariance is not positive definite".into()))?;
        Self::from_factor(chol.l())
    }

    pub fn n_tasks(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `K^f = ΛΛᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        let kf = self.covariance();
        kf[(a, b)] / (kf[(a, a)] * kf[(b, b)]).sqrt()
    }

    /// Optimizer coordinates: every lower-triangular entry except `Λ[0, 0]`.
    fn free_coords(n_tasks: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n_tasks).flat_map(|i| (0..=i).map(move |j| (i, j))).skip(1)
    }

    fn to_free(&self) -> Vec<f64> {
        Self::free_coords(self.n_tasks())
            .map(|(i, j)| {
                let v = self.factor[(i, j)];
                if i == j {
                    v.ln()
                } else {
                    v
                }
            })
            .collect()
    }

    fn from_free(n_tasks: usize, free: &[f64]) -> Self {
        let mut factor = DMatrix::zeros(n_tasks, n_tasks);
        factor[(0, 0)] = 1.0;
        for ((i, j), v) in Self::free_coords(n_tasks).zip(free) {
            factor[(i, j)] = if i == j { v.exp() } else { *v };
        }
        Self { factor }
    }

    fn free_bounds(n_tasks: usize, config: &OptimConfig) -> Vec<Bounds> {
        let diag = Bounds::new(config.log_lower, config.log_upper);
        let off = Bounds::new(-config.log_upper.exp(), config.log_upper.exp());
        Self::free_coords(n_tasks)
            .map(|(i, j)| if i == j { diag } else { off })
            .collect()
    }
}

/// Training points with task labels, plus the concatenated target vector.
#[derive(Debug, Clone)]
pub struct StackedData {
    inputs: DMatrix<f64>,
    tasks: Vec<usize>,
    targets: DVector<f64>,
    n_tasks: usize,
}

impl StackedData {
    pub fn new(inputs: DMatrix<f64>, tasks: Vec<usize>, targets: DVector<f64>, n_tasks: usize) -> Result<Self, GpError> {
        if inputs.nrows() == 0 {
            return Err(GpError::Empty);
        }
        if tasks.len() != inputs.nrows() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.nrows(),
                found: tasks.len(),
            });
        }
        if targets.len() != inputs.nrows() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.nrows(),
                found: targets.len(),
            });
        }
        if let Some(bad) = tasks.iter().find(|t| **t >= n_tasks) {
            return Err(GpError::InvalidParams(format!("task label {bad} out of range for {n_tasks} tasks")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("training inputs"));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("training targets"));
        }
        Ok(Self {
            inputs,
            tasks,
            targets,
            n_tasks,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Gradient of the joint log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct MtGradient {
    /// With respect to `[ln σ_f², ln l…, ln σ_n²]`.
    pub kernel: Vec<f64>,
    /// With respect to each raw entry `Λ[p, q]` (upper triangle is zero).
    pub factor: DMatrix<f64>,
}

/// Stacked covariance `Σ` over `(input, task)` entries.
pub fn stacked_cov(data: &StackedData, params: &KernelParams, coreg: &CoregMatrix) -> Result<DMatrix<f64>, GpError> {
    check_model_params(data, params, coreg)?;
    let geom = Geometry::new(&data.inputs);
    let (mut cov, _) = stacked_signal(&geom, &data.tasks, params, &coreg.covariance());
    for i in 0..cov.nrows() {
        cov[(i, i)] += params.noise_var;
    }
    Ok(cov)
}

/// Joint log marginal likelihood of the stacked targets.
pub fn mt_log_likelihood(data: &StackedData, params: &KernelParams, coreg: &CoregMatrix) -> Result<f64, GpError> {
    let cov = stacked_cov(data, params, coreg)?;
    Ok(GaussianTerms::new(cov, &data.targets, false)?.log_lik)
}

pub fn mt_log_likelihood_grad(
    data: &StackedData,
    params: &KernelParams,
    coreg: &CoregMatrix,
) -> Result<MtGradient, GpError> {
    check_model_params(data, params, coreg)?;
    let objective = Objective::new(data);
    let (_, grad) = objective.eval(params, coreg)?;
    Ok(grad)
}

/// Jointly fits Θ and `K^f` by multi-restart likelihood maximization.
///
/// Restarts perturb Θ exactly as [`gp::fit`] does; `Λ` always starts at the
/// identity.
pub fn mt_fit(data: &StackedData, mode: LengthScaleMode, config: &OptimConfig, seed: u64) -> Result<MtgpModel, GpError> {
    config.validate()?;
    let n_tasks = data.n_tasks;
    let n_scales = mode.count(data.inputs.ncols());
    let mut bounds = config.kernel_bounds(n_scales);
    let n_kernel = bounds.len();
    bounds.extend(CoregMatrix::free_bounds(n_tasks, config));

    let mut base = gp::initial_log_params(&data.inputs, &data.targets, mode);
    base.extend(CoregMatrix::identity(n_tasks).to_free());

    let objective = Objective::new(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (best, summary) = gp::run_restarts(config, &bounds, &mut rng, &base, n_kernel, |x| {
        let params = KernelParams::from_log(&x[..n_kernel]);
        let coreg = CoregMatrix::from_free(n_tasks, &x[n_kernel..]);
        let (v, g) = objective.eval(&params, &coreg).ok()?;
        let mut neg: Vec<f64> = g.kernel.iter().map(|c| -c).collect();
        for ((i, j), lv) in CoregMatrix::free_coords(n_tasks).zip(coreg.to_free()) {
            let d = g.factor[(i, j)];
            // log-parameterized diagonal
            let d = if i == j { d * lv.exp() } else { d };
            neg.push(-d);
        }
        Some((-v, neg))
    })?;

    let params = KernelParams::from_log(&best[..n_kernel]);
    let coreg = CoregMatrix::from_free(n_tasks, &best[n_kernel..]);
    let mut model = MtgpModel::condition(data, &params, &coreg)?;
    model.summary = Some(summary);
    Ok(model)
}

/// A conditioned multi-task GP over one block of tasks.
#[derive(Debug, Clone)]
pub struct MtgpModel {
    data: StackedData,
    params: KernelParams,
    coreg: CoregMatrix,
    chol: JitteredCholesky,
    alpha: DVector<f64>,
    summary: Option<FitSummary>,
}

impl MtgpModel {
    pub fn condition(data: &StackedData, params: &KernelParams, coreg: &CoregMatrix) -> Result<Self, GpError> {
        let cov = stacked_cov(data, params, coreg)?;
        let chol = JitteredCholesky::new(&cov).ok_or(GpError::IllConditioned)?;
        let alpha = chol.solve(&data.targets);
        Ok(Self {
            data: data.clone(),
            params: params.clone(),
            coreg: coreg.clone(),
            chol,
            alpha,
            summary: None,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn coreg(&self) -> &CoregMatrix {
        &self.coreg
    }

    pub fn data(&self) -> &StackedData {
        &self.data
    }

    pub fn summary(&self) -> Option<&FitSummary> {
        self.summary.as_ref()
    }

    /// Posterior mean and latent variance of task `task` at each query row.
    pub fn predict(&self, task: usize, query: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>), GpError> {
        if task >= self.data.n_tasks {
            return Err(GpError::InvalidParams(format!("unknown task {task}")));
        }
        if query.ncols() != self.data.inputs.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: self.data.inputs.ncols(),
                found: query.ncols(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("query inputs"));
        }
        let kf = self.coreg.covariance();
        let train = gp::rows(&self.data.inputs);
        let n = train.len();
        let mut means = DVector::zeros(query.nrows());
        let mut vars = DVector::zeros(query.nrows());
        for (q, row) in gp::rows(query).iter().enumerate() {
            let cross = DVector::from_fn(n, |i, _| kf[(task, self.data.tasks[i])] * self.params.rbf(row, &train[i]));
            means[q] = cross.dot(&self.alpha);
            let v = self.chol.solve_lower(&cross);
            vars[q] = clamp_variance(kf[(task, task)] * self.params.signal_var - v.dot(&v));
        }
        Ok((means, vars))
    }
}

fn check_model_params(data: &StackedData, params: &KernelParams, coreg: &CoregMatrix) -> Result<(), GpError> {
    params.validate(data.inputs.ncols())?;
    if coreg.n_tasks() != data.n_tasks {
        return Err(GpError::DimensionMismatch {
            expected: data.n_tasks,
            found: coreg.n_tasks(),
        });
    }
    Ok(())
}

/// Returns `(Kf∘S, S)` where `S` is the single-task signal matrix.
fn stacked_signal(
    geom: &Geometry,
    tasks: &[usize],
    params: &KernelParams,
    kf: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let base = signal_matrix(geom, params);
    let n = tasks.len();
    let scaled = DMatrix::from_fn(n, n, |i, j| kf[(tasks[i], tasks[j])] * base[(i, j)]);
    (scaled, base)
}

struct Objective<'a> {
    geom: Geometry,
    data: &'a StackedData,
}

impl<'a> Objective<'a> {
    fn new(data: &'a StackedData) -> Self {
        Self {
            geom: Geometry::new(&data.inputs),
            data,
        }
    }

    fn eval(&self, params: &KernelParams, coreg: &CoregMatrix) -> Result<(f64, MtGradient), GpError> {
        let tasks = &self.data.tasks;
        let (s, base) = stacked_signal(&self.geom, tasks, params, &coreg.covariance());
        let mut cov = s.clone();
        for i in 0..cov.nrows() {
            cov[(i, i)] += params.noise_var;
        }
        let terms = GaussianTerms::new(cov, &self.data.targets, true)?;
        let w = terms.w.as_ref().expect("requested");
        let kernel = kernel_gradient(w, &s, &self.geom, params);

        // G[a, b] = Σ_{i∈a, j∈b} W_ij·k_ij, then ∂/∂Λ = G·Λ.
        let t = self.data.n_tasks;
        let mut g = DMatrix::zeros(t, t);
        let n = tasks.len();
        for j in 0..n {
            for i in 0..n {
                g[(tasks[i], tasks[j])] += w[(i, j)] * base[(i, j)];
            }
        }
        let mut factor = &g * coreg.factor();
        for i in 0..t {
            for j in i + 1..t {
                factor[(i, j)] = 0.0;
            }
        }
        Ok((terms.log_lik, MtGradient { kernel, factor }))
    }
}
