//! Box-constrained BFGS.
//!
//! Hyperparameter vectors are short, so a dense inverse-Hessian
//! approximation is kept. Variables sitting on a bound with the gradient
//! pushing outward are held fixed for the iteration; the remaining ones
//! follow the quasi-Newton direction
//! with a strong-Wolfe line search that never steps past the first bound it
//! meets. The objective is minimized. Evaluations that fail (for example a
//! kernel matrix that cannot be factorized) count as `+inf`.

use nalgebra::{DMatrix, DVector};

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;
const EXPANSION: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        if x.is_nan() {
            self.lower
        } else {
            x.clamp(self.lower, self.upper)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` starting from `x0` (clamped into `bounds`).
///
/// `f` returns `(value, gradient)` or `None` when the point cannot be
/// evaluated. Returns `None` only when the starting point itself fails.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    bounds: &[Bounds],
    max_iters: usize,
    grad_tol: f64,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    assert_eq!(x0.len(), bounds.len());
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().zip(bounds).map(|(v, b)| b.clamp(*v)).collect();
    let (mut fx, mut g) = eval_checked(&mut f, &x)?;
    // `None` until the first curvature pair sets the initial scaling.
    let mut inv_hessian: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        let pg = projected_gradient(&x, &g, bounds);
        if inf_norm(&pg) <= grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0).collect();
        let mut d = match &inv_hessian {
            Some(h) => newton_direction(h, &g, &free),
            None => pg.iter().map(|v| -v).collect(),
        };
        block_at_bounds(&mut d, &x, bounds);
        if !(dot(&d, &g) < 0.0) {
            inv_hessian = None;
            d = pg.iter().map(|v| -v).collect();
            block_at_bounds(&mut d, &x, bounds);
        }
        let max_step = max_feasible_step(&x, &d, bounds);
        if !(max_step > 0.0) {
            break;
        }
        let first = if inv_hessian.is_none() { 1.0 / inf_norm(&d) } else { 1.0 };

        let line = Line {
            x: &x,
            d: &d,
            bounds,
            f0: fx,
            slope0: dot(&g, &d),
            max_step,
        };
        let Some(found) = line.search(&mut f, first.min(max_step)) else {
            break;
        };

        let s: Vec<f64> = found.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = found.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            let h = inv_hessian.get_or_insert_with(|| DMatrix::identity(n, n) * (sy / dot(&y, &y)));
            bfgs_update(h, &s, &y, sy);
        }
        let improvement = fx - found.f;
        x = found.x;
        fx = found.f;
        g = found.g;
        if improvement.abs() <= 1e-15 * fx.abs().max(1.0) {
            converged = inf_norm(&projected_gradient(&x, &g, bounds)) <= grad_tol;
            break;
        }
    }

    Some(Minimum {
        x,
        value: fx,
        gradient: g,
        iterations,
        converged,
    })
}

/// Zeroes direction components that would immediately leave the box.
fn block_at_bounds(d: &mut [f64], x: &[f64], bounds: &[Bounds]) {
    for ((di, xi), b) in d.iter_mut().zip(x).zip(bounds) {
        if (*xi <= b.lower && *di < 0.0) || (*xi >= b.upper && *di > 0.0) {
            *di = 0.0;
        }
    }
}

/// Largest `α` keeping `x + α·d` inside the box.
fn max_feasible_step(x: &[f64], d: &[f64], bounds: &[Bounds]) -> f64 {
    x.iter()
        .zip(d)
        .zip(bounds)
        .filter(|((_, di), _)| **di != 0.0)
        .map(|((xi, di), b)| {
            let room = if *di > 0.0 { b.upper - xi } else { b.lower - xi };
            (room / di).max(0.0)
        })
        .fold(f64::INFINITY, f64::min)
}

struct Trial {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// `φ(α) = f(x + α·d)` for `α ∈ (0, max_step]`.
struct Line<'a> {
    x: &'a [f64],
    d: &'a [f64],
    bounds: &'a [Bounds],
    f0: f64,
    slope0: f64,
    max_step: f64,
}

impl Line<'_> {
    fn eval<F>(&self, f: &mut F, step: f64) -> Option<Trial>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let x: Vec<f64> = self
            .x
            .iter()
            .zip(self.d)
            .zip(self.bounds)
            .map(|((xi, di), b)| b.clamp(xi + step * di))
            .collect();
        let (fx, g) = eval_checked(f, &x)?;
        let slope = dot(&g, self.d);
        Some(Trial {
            step,
            x,
            f: fx,
            g,
            slope,
        })
    }

    fn sufficient_decrease(&self, t: &Trial) -> bool {
        t.f <= self.f0 + WOLFE_C1 * t.step * self.slope0
    }

    fn curvature_ok(&self, t: &Trial) -> bool {
        t.slope.abs() <= -WOLFE_C2 * self.slope0
    }

    /// Bracketing phase: expand until the Wolfe conditions hold or a
    /// bracket is found, then refine. Falls back to the best point with
    /// sufficient decrease when the evaluation budget runs out.
    fn search<F>(&self, f: &mut F, first: f64) -> Option<Trial>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let mut prev: Option<Trial> = None;
        let mut step = first;
        for _ in 0..MAX_LINE_EVALS {
            let Some(t) = self.eval(f, step) else {
                return self.zoom(f, prev, step, None);
            };
            let worse_than_prev = prev.as_ref().is_some_and(|p| t.f >= p.f);
            if !self.sufficient_decrease(&t) || worse_than_prev {
                return self.zoom(f, prev, step, Some(t.f));
            }
            if self.curvature_ok(&t) || step >= self.max_step {
                return Some(t);
            }
            if t.slope >= 0.0 {
                let (hi, f_hi) = prev.as_ref().map_or((0.0, self.f0), |p| (p.step, p.f));
                return self.zoom_between(f, t, hi, Some(f_hi));
            }
            step = (step * EXPANSION).min(self.max_step);
            prev = Some(t);
        }
        prev
    }

    fn zoom<F>(&self, f: &mut F, lo: Option<Trial>, hi: f64, f_hi: Option<f64>) -> Option<Trial>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        match lo {
            Some(lo) => self.zoom_between(f, lo, hi, f_hi),
            None => {
                let origin = Trial {
                    step: 0.0,
                    x: self.x.to_vec(),
                    f: self.f0,
                    g: Vec::new(),
                    slope: self.slope0,
                };
                self.zoom_between(f, origin, hi, f_hi).filter(|t| t.step > 0.0)
            }
        }
    }

    /// Shrinks `[lo, hi]` (in either order); `lo` always satisfies
    /// sufficient decrease and has the lowest value seen.
    fn zoom_between<F>(&self, f: &mut F, mut lo: Trial, mut hi: f64, mut f_hi: Option<f64>) -> Option<Trial>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        for _ in 0..MAX_LINE_EVALS {
            let width = hi - lo.step;
            let mut step = match f_hi {
                // minimizer of the quadratic through φ(lo), φ'(lo), φ(hi)
                Some(fh) => {
                    let denom = 2.0 * (fh - lo.f - lo.slope * width);
                    if denom > 0.0 {
                        lo.step - lo.slope * width * width / denom
                    } else {
                        lo.step + 0.5 * width
                    }
                }
                None => lo.step + 0.5 * width,
            };
            let (a, b) = if lo.step < hi { (lo.step, hi) } else { (hi, lo.step) };
            let margin = 0.1 * (b - a);
            if !(step >= a + margin && step <= b - margin) {
                step = 0.5 * (a + b);
            }
            if (b - a) <= 1e-14 * b.abs().max(1.0) {
                break;
            }
            match self.eval(f, step) {
                None => {
                    hi = step;
                    f_hi = None;
                }
                Some(t) if !self.sufficient_decrease(&t) || t.f >= lo.f => {
                    hi = step;
                    f_hi = Some(t.f);
                }
                Some(t) => {
                    if self.curvature_ok(&t) {
                        return Some(t);
                    }
                    if t.slope * (hi - lo.step) >= 0.0 {
                        hi = lo.step;
                        f_hi = Some(lo.f);
                    }
                    lo = t;
                }
            }
        }
        Some(lo)
    }
}

fn eval_checked<F>(f: &mut F, x: &[f64]) -> Option<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (v, g) = f(x)?;
    if v.is_finite() && g.iter().all(|c| c.is_finite()) {
        Some((v, g))
    } else {
        None
    }
}

/// Gradient with components zeroed where the bound blocks descent.
pub fn projected_gradient(x: &[f64], g: &[f64], bounds: &[Bounds]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((xi, gi), b)| {
            if (*xi <= b.lower && *gi > 0.0) || (*xi >= b.upper && *gi < 0.0) {
                0.0
            } else {
                *gi
            }
        })
        .collect()
}

/// `−H g` restricted to the free variables.
fn newton_direction(h: &DMatrix<f64>, g: &[f64], free: &[bool]) -> Vec<f64> {
    (0..g.len())
        .map(|i| {
            if !free[i] {
                return 0.0;
            }
            -(0..g.len()).filter(|j| free[*j]).map(|j| h[(i, j)] * g[j]).sum::<f64>()
        })
        .collect()
}

/// `H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ` with `ρ = 1/sᵀy`.
fn bfgs_update(h: &mut DMatrix<f64>, s: &[f64], y: &[f64], sy: f64) {
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let rho = 1.0 / sy;
    let hy = &*h * &y;
    let yhy = y.dot(&hy);
    *h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
    *h += &s * s.transpose() * (rho * rho * yhy + rho);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
