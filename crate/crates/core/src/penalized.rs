//! Elastic-net penalized logistic regression.
//!
//! For a fixed `λ` the solver minimizes
//!
//! ```text
//! (1/n) Σ_i [log(1 + exp(η_i)) - y_i η_i]
//!     + λ Σ_j [ ρ (w_j β_j)² + (1 - ρ) w_j |β_j| ],     η = β₀ + Xβ
//! ```
//!
//! with an unpenalized intercept. `w ≡ 1` gives the plain elastic net;
//! `w_j = 1 / |β̃_j|` gives the adaptive form, where both penalty parts are
//! taken on `β_j / β̃_j`.
//!
//! The path is solved by cyclic coordinate descent with warm starts from the
//! previous `λ`. Each coordinate takes a proximal Newton step using the exact
//! local curvature; if that step would raise the objective it is replaced by
//! the step under the global curvature bound `0.25 · mean(x²)`, which always
//! descends. Sweeps therefore never increase the objective.
//!
//! Between full sweeps, small active sets get Newton iterations with the
//! coefficient signs held fixed. This matters on collinear designs, where
//! plain coordinate descent crawls.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dirichlet::draw_rng;
use crate::error::{invalid_input, invalid_param, Result};
use crate::eval::accuracy_at_fdr;
use crate::features::inv_logit;
use crate::sparse::{CscMatrix, SparseRow};

/// Default cap on nonzero coefficients along a path.
pub const DEFAULT_MAX_ACTIVE: usize = 20_000;

/// Largest `rows · (active + 1)²` for which the dense Newton polish runs.
const NEWTON_WORK_MAX: usize = 50_000_000;
const NEWTON_MAX_ITER: usize = 50;

/// Probability clip used when scoring deviance on held-out data.
const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// `n` log-spaced values from `λ_max` down to `min_ratio · λ_max`.
    Auto { n: usize, min_ratio: f64 },
    /// Explicit strictly descending positive values.
    Explicit(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto {
            n: 100,
            min_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Weight on the quadratic part, in `[0, 1]`.
    pub rho: f64,
    pub lambda_grid: LambdaGrid,
    /// Per-column adaptive weights; `None` means all ones.
    pub weights: Option<Vec<f64>>,
    pub max_active: usize,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    /// Required bound on the KKT residual at every returned solution.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
    /// Stop the path once this fraction of null deviance is explained.
    pub saturation: Option<f64>,
    /// Record the objective after every sweep.
    pub record_trace: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            rho: 0.5,
            lambda_grid: LambdaGrid::default(),
            weights: None,
            max_active: DEFAULT_MAX_ACTIVE,
            tol: 1e-7,
            kkt_tol: 1e-7,
            max_sweeps: 100_000,
            saturation: Some(0.999),
            record_trace: false,
        }
    }
}

impl PenaltyConfig {
    fn validate(&self, p: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid_param(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if let Some(w) = &self.weights {
            if w.len() != p {
                return Err(invalid_param(format!("{} weights for {p} columns", w.len())));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid_param("adaptive weights must be finite and positive"));
            }
        }
        match &self.lambda_grid {
            LambdaGrid::Auto { n, min_ratio } => {
                if *n == 0 || !(*min_ratio > 0.0 && *min_ratio <= 1.0) {
                    return Err(invalid_param("lambda grid needs n >= 1 and min_ratio in (0, 1]"));
                }
            }
            LambdaGrid::Explicit(g) => {
                if g.is_empty() || g.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(invalid_param("lambda grid values must be positive"));
                }
                if g.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(invalid_param("lambda grid must be strictly descending"));
                }
            }
        }
        Ok(())
    }

    fn weight(&self, j: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[j])
    }
}

/// Intercept plus sparse slopes over `ncols` design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoefficients {
    pub intercept: f64,
    pub ncols: usize,
    /// `(column, value)` pairs with nonzero values, ascending by column.
    pub slopes: Vec<(usize, f64)>,
}

impl SparseCoefficients {
    pub fn intercept_only(intercept: f64, ncols: usize) -> Self {
        SparseCoefficients {
            intercept,
            ncols,
            slopes: Vec::new(),
        }
    }

    pub fn dense_slopes(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.ncols];
        for &(j, v) in &self.slopes {
            b[j] = v;
        }
        b
    }

    pub fn active(&self) -> usize {
        self.slopes.len()
    }
}

/// `β₀ + Σ β_j x_j` for one sparse design row.
pub fn predict_linear(coef: &SparseCoefficients, row: &[(usize, f64)]) -> Result<f64> {
    let mut eta = coef.intercept;
    let mut k = 0;
    let mut sorted = true;
    for w in row.windows(2) {
        if w[1].0 <= w[0].0 {
            sorted = false;
            break;
        }
    }
    if let Some(&(j, _)) = row.iter().find(|e| e.0 >= coef.ncols) {
        return Err(invalid_input(format!(
            "design column {j} >= model width {}",
            coef.ncols
        )));
    }
    if sorted {
        for &(j, x) in row {
            while k < coef.slopes.len() && coef.slopes[k].0 < j {
                k += 1;
            }
            if k < coef.slopes.len() && coef.slopes[k].0 == j {
                eta += coef.slopes[k].1 * x;
            }
        }
    } else {
        for &(j, x) in row {
            if let Ok(i) = coef.slopes.binary_search_by_key(&j, |e| e.0) {
                eta += coef.slopes[i].1 * x;
            }
        }
    }
    Ok(eta)
}

pub fn predict_prob(coef: &SparseCoefficients, row: &[(usize, f64)]) -> Result<f64> {
    predict_linear(coef, row).map(inv_logit)
}

/// Solution at one `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub coef: SparseCoefficients,
    pub objective: f64,
    /// Mean binomial deviance on the training data.
    pub deviance: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    /// Objective after each sweep, when tracing was requested.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda_max: f64,
    pub rho: f64,
    pub path: Vec<PathPoint>,
    /// Labels were all one class; every point is intercept-only.
    pub degenerate_labels: bool,
    /// The path ended early because the active-set cap would be exceeded.
    pub hit_max_active: bool,
    /// The path ended early on deviance saturation.
    pub saturated: bool,
}

impl FitResult {
    pub fn all_converged(&self) -> bool {
        self.path.iter().all(|p| p.converged)
    }
}

#[inline]
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(invalid_input(format!("labels must be 0 or 1, found {v}")));
    }
    Ok(())
}

fn linear_predictor(design: &CscMatrix, intercept: f64, beta: &[f64]) -> Vec<f64> {
    let mut eta = vec![intercept; design.nrows()];
    design.add_mul_vec(beta, &mut eta);
    eta
}

/// Mean negative log-likelihood.
pub fn mean_nll(design: &CscMatrix, labels: &[f64], intercept: f64, beta: &[f64]) -> f64 {
    let eta = linear_predictor(design, intercept, beta);
    eta.iter().zip(labels).map(|(&e, &y)| softplus(e) - y * e).sum::<f64>() / labels.len() as f64
}

/// Mean NLL plus the quadratic penalty part: the differentiable piece of the objective.
pub fn smooth_objective(
    design: &CscMatrix,
    labels: &[f64],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
    rho: f64,
    weights: Option<&[f64]>,
) -> f64 {
    let quad: f64 = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let w = weights.map_or(1.0, |w| w[j]);
            (w * b).powi(2)
        })
        .sum();
    mean_nll(design, labels, intercept, beta) + lambda * rho * quad
}

/// Analytic gradient of [`smooth_objective`]: `(∂/∂β₀, ∂/∂β)`.
pub fn smooth_gradient(
    design: &CscMatrix,
    labels: &[f64],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
    rho: f64,
    weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let eta = linear_predictor(design, intercept, beta);
    let resid: Vec<f64> = eta.iter().zip(labels).map(|(&e, &y)| inv_logit(e) - y).collect();
    let g0 = resid.iter().sum::<f64>() / n;
    let g = (0..design.ncols())
        .map(|j| {
            let (ri, vs) = design.column(j);
            let w = weights.map_or(1.0, |w| w[j]);
            ri.iter().zip(vs).map(|(&i, &v)| v * resid[i]).sum::<f64>() / n + 2.0 * lambda * rho * w * w * beta[j]
        })
        .collect();
    (g0, g)
}

/// Full penalized objective.
pub fn penalized_objective(
    design: &CscMatrix,
    labels: &[f64],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
    rho: f64,
    weights: Option<&[f64]>,
) -> f64 {
    let l1: f64 = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| weights.map_or(1.0, |w| w[j]) * b.abs())
        .sum();
    smooth_objective(design, labels, intercept, beta, lambda, rho, weights) + lambda * (1.0 - rho) * l1
}

/// Largest violation of the coordinate-wise optimality conditions.
pub fn kkt_residual(
    design: &CscMatrix,
    labels: &[f64],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
    rho: f64,
    weights: Option<&[f64]>,
) -> f64 {
    let (g0, g) = smooth_gradient(design, labels, intercept, beta, lambda, rho, weights);
    let mut worst = g0.abs();
    for (j, (&gj, &b)) in g.iter().zip(beta).enumerate() {
        let l1 = lambda * (1.0 - rho) * weights.map_or(1.0, |w| w[j]);
        let r = if b != 0.0 {
            (gj + l1 * b.signum()).abs()
        } else {
            (gj.abs() - l1).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

/// Smallest `λ` at which the all-zero slope vector is optimal. For `ρ = 1`
/// the L1 share is floored at `1e-3` so the grid stays finite.
pub fn lambda_max(design: &CscMatrix, labels: &[f64], rho: f64, weights: Option<&[f64]>) -> f64 {
    let n = labels.len() as f64;
    let ybar = labels.iter().sum::<f64>() / n;
    let l1_share = (1.0 - rho).max(1e-3);
    let mut best: f64 = 0.0;
    for j in 0..design.ncols() {
        let (ri, vs) = design.column(j);
        let g = ri.iter().zip(vs).map(|(&i, &v)| v * (ybar - labels[i])).sum::<f64>() / n;
        let w = weights.map_or(1.0, |w| w[j]);
        best = best.max(g.abs() / (l1_share * w));
    }
    if best > 0.0 {
        best
    } else {
        1.0
    }
}

fn mean_deviance(eta: &[f64], labels: &[f64]) -> f64 {
    2.0 * eta.iter().zip(labels).map(|(&e, &y)| softplus(e) - y * e).sum::<f64>() / labels.len() as f64
}

struct Solver<'a> {
    x: &'a CscMatrix,
    y: &'a [f64],
    cfg: &'a PenaltyConfig,
    n: f64,
    beta: Vec<f64>,
    intercept: f64,
    eta: Vec<f64>,
    prob: Vec<f64>,
    /// 0.25 · mean(x_j²), the global curvature bound per column.
    mm_curv: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(x: &'a CscMatrix, y: &'a [f64], cfg: &'a PenaltyConfig, intercept: f64) -> Self {
        let n = y.len() as f64;
        let mm_curv = (0..x.ncols())
            .map(|j| 0.25 * x.column(j).1.iter().map(|v| v * v).sum::<f64>() / n)
            .collect();
        let eta = vec![intercept; y.len()];
        let prob = eta.iter().map(|&e| inv_logit(e)).collect();
        Solver {
            x,
            y,
            cfg,
            n,
            beta: vec![0.0; x.ncols()],
            intercept,
            eta,
            prob,
            mm_curv,
        }
    }

    fn objective(&self, lambda: f64) -> f64 {
        let nll = self
            .eta
            .iter()
            .zip(self.y)
            .map(|(&e, &y)| softplus(e) - y * e)
            .sum::<f64>()
            / self.n;
        let rho = self.cfg.rho;
        let pen: f64 = self
            .beta
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, &b)| {
                let w = self.cfg.weight(j);
                rho * (w * b).powi(2) + (1.0 - rho) * w * b.abs()
            })
            .sum();
        nll + lambda * pen
    }

    fn update_intercept(&mut self) -> f64 {
        let g = self.prob.iter().zip(self.y).map(|(&p, &y)| p - y).sum::<f64>() / self.n;
        let h = self.prob.iter().map(|&p| p * (1.0 - p)).sum::<f64>() / self.n;
        let try_step = |s: &Self, delta: f64| -> f64 {
            s.eta
                .iter()
                .zip(s.y)
                .map(|(&e, &y)| softplus(e + delta) - softplus(e) - y * delta)
                .sum::<f64>()
                / s.n
        };
        let mut delta = if h > 1e-300 { -g / h } else { 0.0 };
        if delta == 0.0 || !delta.is_finite() || try_step(self, delta) > 0.0 {
            delta = -g / 0.25;
            if try_step(self, delta) > 0.0 {
                return 0.0;
            }
        }
        if delta == 0.0 {
            return 0.0;
        }
        self.intercept += delta;
        for (e, p) in self.eta.iter_mut().zip(self.prob.iter_mut()) {
            *e += delta;
            *p = inv_logit(*e);
        }
        delta.abs()
    }

    /// Change in objective if coordinate `j` moves from `old` to `new`.
    fn delta_objective(&self, j: usize, old: f64, new: f64, a: f64, b: f64) -> f64 {
        let d = new - old;
        let (ri, vs) = self.x.column(j);
        let loss: f64 = ri
            .iter()
            .zip(vs)
            .map(|(&i, &v)| {
                let e = self.eta[i];
                softplus(e + d * v) - softplus(e) - self.y[i] * d * v
            })
            .sum::<f64>()
            / self.n;
        loss + a * (new * new - old * old) + b * (new.abs() - old.abs())
    }

    fn update_coord(&mut self, j: usize, lambda: f64) -> f64 {
        let (ri, vs) = self.x.column(j);
        let old = self.beta[j];
        if ri.is_empty() {
            self.beta[j] = 0.0;
            return old.abs();
        }
        let mut g = 0.0;
        let mut h = 0.0;
        for (&i, &v) in ri.iter().zip(vs) {
            let p = self.prob[i];
            g += v * (p - self.y[i]);
            h += v * v * p * (1.0 - p);
        }
        g /= self.n;
        h /= self.n;
        let w = self.cfg.weight(j);
        let a = lambda * self.cfg.rho * w * w;
        let b = lambda * (1.0 - self.cfg.rho) * w;
        let step = |curv: f64| soft_threshold(curv * old - g, b) / (curv + 2.0 * a);
        let mut new = if h + 2.0 * a > 0.0 { step(h) } else { f64::NAN };
        // Quadratic upper bound on the loss; when it already shows descent the
        // exact check over the column can be skipped.
        let bound = |new: f64| {
            let d = new - old;
            g * d + 0.5 * self.mm_curv[j] * d * d + a * (new * new - old * old) + b * (new.abs() - old.abs())
        };
        if !new.is_finite() || (new != old && bound(new) > 0.0 && self.delta_objective(j, old, new, a, b) > 0.0) {
            new = step(self.mm_curv[j]);
            if !new.is_finite() || self.delta_objective(j, old, new, a, b) > 0.0 {
                return 0.0;
            }
        }
        if new == old {
            return 0.0;
        }
        let d = new - old;
        self.beta[j] = new;
        for (&i, &v) in ri.iter().zip(vs) {
            self.eta[i] += d * v;
            self.prob[i] = inv_logit(self.eta[i]);
        }
        d.abs()
    }

    /// Newton iterations on the active set with signs held fixed, where the
    /// objective is smooth. Steps stop at the first coefficient that would
    /// cross zero, which is then dropped. Returns false if the active set is
    /// too large for a dense Hessian or no step made progress.
    fn newton_polish(&mut self, lambda: f64) -> bool {
        let active: Vec<usize> = (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect();
        let k = active.len() + 1;
        if active.is_empty() || self.y.len() * k * k > NEWTON_WORK_MAX {
            return false;
        }
        let n = self.y.len();
        let mut z = DMatrix::<f64>::zeros(n, k);
        z.column_mut(0).fill(1.0);
        for (c, &j) in active.iter().enumerate() {
            let (ri, vs) = self.x.column(j);
            for (&i, &v) in ri.iter().zip(vs) {
                z[(i, c + 1)] = v;
            }
        }
        let rho = self.cfg.rho;
        let quad: Vec<f64> = active
            .iter()
            .map(|&j| lambda * rho * self.cfg.weight(j).powi(2))
            .collect();
        let lin: Vec<f64> = active
            .iter()
            .map(|&j| lambda * (1.0 - rho) * self.cfg.weight(j) * self.beta[j].signum())
            .collect();
        let mut progressed = false;
        for _ in 0..NEWTON_MAX_ITER {
            let resid = DVector::from_iterator(n, self.prob.iter().zip(self.y).map(|(&p, &y)| p - y));
            let mut g = z.tr_mul(&resid) / self.n;
            let wz = DMatrix::from_fn(n, k, |i, c| z[(i, c)] * self.prob[i] * (1.0 - self.prob[i]));
            let mut h = z.tr_mul(&wz) / self.n;
            for (c, &j) in active.iter().enumerate() {
                g[c + 1] += 2.0 * quad[c] * self.beta[j] + lin[c];
                h[(c + 1, c + 1)] += 2.0 * quad[c];
            }
            if g.amax() < 0.1 * self.cfg.kkt_tol {
                break;
            }
            let Some(chol) = h.cholesky() else {
                break;
            };
            let d = chol.solve(&(-&g));
            let mut t_max = 1.0f64;
            let mut hit = None;
            for (c, &j) in active.iter().enumerate() {
                let (b, dj) = (self.beta[j], d[c + 1]);
                if b != 0.0 && (b + dj).signum() != b.signum() && -b / dj < t_max {
                    t_max = -b / dj;
                    hit = Some(j);
                }
            }
            let old_obj = self.objective(lambda);
            let slope = g.dot(&d);
            let start = (self.intercept, self.beta.clone(), self.eta.clone());
            let mut t = t_max;
            let mut accepted = false;
            while t > 1e-10 {
                self.intercept = start.0 + t * d[0];
                for (c, &j) in active.iter().enumerate() {
                    let b = start.1[j];
                    if b == 0.0 {
                        continue;
                    }
                    let v = b + t * d[c + 1];
                    self.beta[j] = if (t == t_max && hit == Some(j)) || v.signum() != b.signum() {
                        0.0
                    } else {
                        v
                    };
                }
                self.eta = linear_predictor(self.x, self.intercept, &self.beta);
                for (p, &e) in self.prob.iter_mut().zip(&self.eta) {
                    *p = inv_logit(e);
                }
                if self.objective(lambda) <= old_obj + 1e-4 * t * slope {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                self.intercept = start.0;
                self.beta = start.1;
                self.eta = start.2;
                for (p, &e) in self.prob.iter_mut().zip(&self.eta) {
                    *p = inv_logit(e);
                }
                break;
            }
            progressed = true;
            if t == t_max && hit.is_some() {
                // A coefficient hit zero; the signs changed, so restart.
                return true;
            }
        }
        progressed
    }

    fn sweep(&mut self, cols: &[usize], lambda: f64) -> f64 {
        let mut change = self.update_intercept();
        for &j in cols {
            change = change.max(self.update_coord(j, lambda));
        }
        change
    }

    fn kkt(&self, lambda: f64) -> f64 {
        kkt_residual(
            self.x,
            self.y,
            self.intercept,
            &self.beta,
            lambda,
            self.cfg.rho,
            self.cfg.weights.as_deref(),
        )
    }

    /// Coordinate descent to convergence at one `λ`, warm-started from the
    /// current state. Returns `(sweeps, converged, kkt, trace)`.
    fn solve(&mut self, lambda: f64) -> (usize, bool, f64, Vec<f64>) {
        let all: Vec<usize> = (0..self.x.ncols()).collect();
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut tol = self.cfg.tol;
        let record = self.cfg.record_trace;
        loop {
            if sweeps >= self.cfg.max_sweeps {
                let k = self.kkt(lambda);
                return (sweeps, k <= self.cfg.kkt_tol, k, trace);
            }
            let change = self.sweep(&all, lambda);
            sweeps += 1;
            if record {
                trace.push(self.objective(lambda));
            }
            if change < tol {
                let k = self.kkt(lambda);
                if k <= self.cfg.kkt_tol {
                    return (sweeps, true, k, trace);
                }
                if tol <= 1e-15 {
                    return (sweeps, false, k, trace);
                }
                tol *= 0.1;
                continue;
            }
            if self.newton_polish(lambda) {
                sweeps += 1;
                if record {
                    trace.push(self.objective(lambda));
                }
                continue;
            }
            // Iterate over the current active set until it settles.
            loop {
                let active: Vec<usize> = all.iter().copied().filter(|&j| self.beta[j] != 0.0).collect();
                if sweeps >= self.cfg.max_sweeps {
                    break;
                }
                let change = self.sweep(&active, lambda);
                sweeps += 1;
                if record {
                    trace.push(self.objective(lambda));
                }
                if change < tol {
                    break;
                }
            }
        }
    }

    fn coefficients(&self) -> SparseCoefficients {
        SparseCoefficients {
            intercept: self.intercept,
            ncols: self.x.ncols(),
            slopes: self
                .beta
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0.0)
                .map(|(j, &b)| (j, b))
                .collect(),
        }
    }
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Resolve the configured grid into explicit values for this design.
pub fn resolve_grid(design: &CscMatrix, labels: &[f64], cfg: &PenaltyConfig) -> Vec<f64> {
    match &cfg.lambda_grid {
        LambdaGrid::Explicit(g) => g.clone(),
        LambdaGrid::Auto { n, min_ratio } => {
            let lmax = lambda_max(design, labels, cfg.rho, cfg.weights.as_deref());
            log_grid(lmax, *n, *min_ratio)
        }
    }
}

fn log_grid(lmax: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lmax];
    }
    let step = min_ratio.ln() / (n - 1) as f64;
    (0..n).map(|k| lmax * (step * k as f64).exp()).collect()
}

/// Fit the full regularization path.
pub fn fit_path(design: &CscMatrix, labels: &[f64], cfg: &PenaltyConfig) -> Result<FitResult> {
    if design.nrows() != labels.len() {
        return Err(invalid_input(format!(
            "design has {} rows but {} labels",
            design.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid_input("no observations"));
    }
    check_labels(labels)?;
    cfg.validate(design.ncols())?;
    let n = labels.len() as f64;
    let ybar = labels.iter().sum::<f64>() / n;
    let lmax = lambda_max(design, labels, cfg.rho, cfg.weights.as_deref());
    let grid = resolve_grid(design, labels, cfg);

    if ybar == 0.0 || ybar == 1.0 {
        let clipped = ybar.clamp(0.5 / n, 1.0 - 0.5 / n);
        let intercept = (clipped / (1.0 - clipped)).ln();
        let coef = SparseCoefficients::intercept_only(intercept, design.ncols());
        let eta = vec![intercept; labels.len()];
        let deviance = mean_deviance(&eta, labels);
        let path = grid
            .iter()
            .map(|&lambda| PathPoint {
                lambda,
                coef: coef.clone(),
                objective: deviance / 2.0,
                deviance,
                sweeps: 0,
                converged: true,
                kkt_residual: 0.0,
                trace: Vec::new(),
            })
            .collect();
        return Ok(FitResult {
            lambda_max: lmax,
            rho: cfg.rho,
            path,
            degenerate_labels: true,
            hit_max_active: false,
            saturated: false,
        });
    }

    let null_eta = vec![(ybar / (1.0 - ybar)).ln(); labels.len()];
    let null_dev = mean_deviance(&null_eta, labels);
    let mut solver = Solver::new(design, labels, cfg, null_eta[0]);
    let mut path = Vec::with_capacity(grid.len());
    let mut hit_max_active = false;
    let mut saturated = false;
    for &lambda in &grid {
        let (sweeps, converged, kkt, trace) = solver.solve(lambda);
        let coef = solver.coefficients();
        if coef.active() > cfg.max_active {
            hit_max_active = true;
            break;
        }
        let deviance = mean_deviance(&solver.eta, labels);
        path.push(PathPoint {
            lambda,
            objective: solver.objective(lambda),
            coef,
            deviance,
            sweeps,
            converged,
            kkt_residual: kkt,
            trace,
        });
        if let Some(frac) = cfg.saturation {
            if null_dev > 0.0 && 1.0 - deviance / null_dev >= frac {
                saturated = true;
                break;
            }
        }
    }
    Ok(FitResult {
        lambda_max: lmax,
        rho: cfg.rho,
        path,
        degenerate_labels: false,
        hit_max_active,
        saturated,
    })
}

/// Stratified fold assignment: each class is shuffled with the seed and
/// dealt round-robin, so every fold gets a near-equal share of both classes.
pub fn stratified_folds(labels: &[f64], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = draw_rng(seed, u64::MAX);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for class in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (r, &i) in idx.iter().enumerate() {
            fold[i] = (r + offset) % k;
        }
        offset += idx.len();
    }
    fold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fdr")]
pub enum CvCriterion {
    /// Mean binomial deviance on held-out data.
    Deviance,
    /// Held-out error rate at probability threshold 0.5.
    Misclassification,
    /// Negative held-out malware detection rate at the given benign FP rate.
    DetectionAtFdr(f64),
}

impl CvCriterion {
    /// Lower is better.
    fn score(self, eta: &[f64], labels: &[f64]) -> f64 {
        match self {
            CvCriterion::Deviance => {
                eta.iter()
                    .zip(labels)
                    .map(|(&e, &y)| {
                        let p = inv_logit(e).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                        -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                    })
                    .sum::<f64>()
                    / labels.len() as f64
            }
            CvCriterion::Misclassification => {
                eta.iter()
                    .zip(labels)
                    .filter(|(&e, &y)| (e > 0.0) != (y == 1.0))
                    .count() as f64
                    / labels.len() as f64
            }
            CvCriterion::DetectionAtFdr(fdr) => {
                let bools: Vec<bool> = labels.iter().map(|&y| y == 1.0).collect();
                accuracy_at_fdr(eta, &bools, fdr).map_or(0.0, |d| -d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub criterion: CvCriterion,
    /// Candidate ρ values; `None` tunes λ only at the configured ρ.
    pub rho_grid: Option<Vec<f64>>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            seed: 0,
            criterion: CvCriterion::Deviance,
            rho_grid: None,
        }
    }
}

/// Cross-validation error along the λ grid for one ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub rho: f64,
    pub lambdas: Vec<f64>,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    pub best_rho: f64,
    pub best_error: f64,
    pub curves: Vec<CvCurve>,
    /// Folds whose training or held-out part contained a single class.
    pub single_class_folds: Vec<usize>,
}

/// Choose `(λ, ρ)` by k-fold cross-validation.
///
/// For each ρ the λ grid is fixed from the full data, every fold's path is
/// fit on that grid, and held-out linear predictors are pooled before the
/// criterion is evaluated. Only λ values reached by every fold are
/// considered. Ties go to the larger λ, then to the earlier ρ.
pub fn cv_tune(design: &CscMatrix, labels: &[f64], cfg: &PenaltyConfig, cv: &CvConfig) -> Result<CvResult> {
    if cv.folds < 2 {
        return Err(invalid_param(format!("need at least 2 folds, got {}", cv.folds)));
    }
    if design.nrows() != labels.len() {
        return Err(invalid_input("design rows and labels differ in length"));
    }
    if labels.len() < cv.folds {
        return Err(invalid_input(format!(
            "{} observations cannot fill {} folds",
            labels.len(),
            cv.folds
        )));
    }
    check_labels(labels)?;
    let fold = stratified_folds(labels, cv.folds, cv.seed);
    let rhos = cv.rho_grid.clone().unwrap_or_else(|| vec![cfg.rho]);
    let mut single_class_folds = Vec::new();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..cv.folds)
        .map(|f| {
            let train = (0..labels.len()).filter(|&i| fold[i] != f).collect::<Vec<_>>();
            let test = (0..labels.len()).filter(|&i| fold[i] == f).collect::<Vec<_>>();
            (train, test)
        })
        .collect();
    for (f, (train, test)) in splits.iter().enumerate() {
        let single = |idx: &[usize]| {
            let ones = idx.iter().filter(|&&i| labels[i] == 1.0).count();
            ones == 0 || ones == idx.len()
        };
        if single(train) || single(test) {
            single_class_folds.push(f);
        }
    }

    let mut curves = Vec::with_capacity(rhos.len());
    for &rho in &rhos {
        let mut rcfg = cfg.clone();
        rcfg.rho = rho;
        let grid = resolve_grid(design, labels, &rcfg);
        rcfg.lambda_grid = LambdaGrid::Explicit(grid.clone());
        let mut held_out = vec![vec![0.0; labels.len()]; grid.len()];
        let mut reached = grid.len();
        for (train, test) in &splits {
            let xt = design.select_rows(train);
            let yt: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
            let fit = fit_path(&xt, &yt, &rcfg)?;
            reached = reached.min(fit.path.len());
            let xtest = design.select_rows(test).to_rows();
            for (k, point) in fit.path.iter().enumerate() {
                for (row, &i) in xtest.iter().zip(test) {
                    held_out[k][i] = predict_linear(&point.coef, row)?;
                }
            }
        }
        let errors: Vec<f64> = held_out[..reached]
            .iter()
            .map(|eta| cv.criterion.score(eta, labels))
            .collect();
        curves.push(CvCurve {
            rho,
            lambdas: grid[..reached].to_vec(),
            errors,
        });
    }

    let mut best: Option<(f64, f64, f64)> = None;
    for curve in &curves {
        for (k, &e) in curve.errors.iter().enumerate() {
            if best.is_none_or(|(_, _, b)| e < b) {
                best = Some((curve.lambdas[k], curve.rho, e));
            }
        }
    }
    let (best_lambda, best_rho, best_error) =
        best.ok_or_else(|| crate::error::Error::Training("no λ reached by every fold".into()))?;
    Ok(CvResult {
        best_lambda,
        best_rho,
        best_error,
        curves,
        single_class_folds,
    })
}

/// Rows of a design as sparse rows; helper for scoring.
pub fn design_rows(design: &CscMatrix) -> Vec<SparseRow> {
    design.to_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_problem(n: usize, p: usize, seed: u64) -> (CscMatrix, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..p).map(|j| if j < 2 { 1.5 } else { 0.0 }).collect();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            y.push(if rng.random::<f64>() < inv_logit(eta) { 1.0 } else { 0.0 });
            rows.push(x);
        }
        (CscMatrix::from_dense(&rows).unwrap(), y)
    }

    #[test]
    fn null_model_at_lambda_max() {
        let (x, y) = random_problem(60, 5, 1);
        let lmax = lambda_max(&x, &y, 0.5, None);
        let cfg = PenaltyConfig {
            lambda_grid: LambdaGrid::Explicit(vec![lmax * 1.0001]),
            ..Default::default()
        };
        let fit = fit_path(&x, &y, &cfg).unwrap();
        let pt = &fit.path[0];
        assert_eq!(pt.coef.active(), 0);
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        assert!((pt.coef.intercept - (ybar / (1.0 - ybar)).ln()).abs() < 1e-7);
    }

    #[test]
    fn path_satisfies_kkt_and_deviance_decreases() {
        let (x, y) = random_problem(80, 6, 2);
        let cfg = PenaltyConfig {
            lambda_grid: LambdaGrid::Auto { n: 20, min_ratio: 1e-3 },
            saturation: None,
            ..Default::default()
        };
        let fit = fit_path(&x, &y, &cfg).unwrap();
        assert!(fit.all_converged());
        for pt in &fit.path {
            assert!(pt.kkt_residual <= 1e-7, "kkt {}", pt.kkt_residual);
        }
        for w in fit.path.windows(2) {
            assert!(w[1].deviance <= w[0].deviance + 1e-12);
        }
    }

    #[test]
    fn sweeps_never_increase_objective() {
        let (x, y) = random_problem(70, 8, 3);
        for rho in [0.0, 0.5, 1.0] {
            let cfg = PenaltyConfig {
                rho,
                lambda_grid: LambdaGrid::Auto { n: 10, min_ratio: 1e-2 },
                record_trace: true,
                ..Default::default()
            };
            let fit = fit_path(&x, &y, &cfg).unwrap();
            for pt in &fit.path {
                for w in pt.trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-13, "rho {rho}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn degenerate_labels_give_intercept_only() {
        let (x, _) = random_problem(20, 3, 4);
        let fit = fit_path(&x, &[1.0; 20], &PenaltyConfig::default()).unwrap();
        assert!(fit.degenerate_labels);
        assert!(fit.path.iter().all(|p| p.coef.active() == 0 && p.coef.intercept > 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, mut y) = random_problem(20, 3, 5);
        y[0] = 0.5;
        assert!(fit_path(&x, &y, &PenaltyConfig::default()).is_err());
        y[0] = 1.0;
        let bad = PenaltyConfig {
            lambda_grid: LambdaGrid::Explicit(vec![0.1, 0.2]),
            ..Default::default()
        };
        assert!(fit_path(&x, &y, &bad).is_err());
        let bad_w = PenaltyConfig {
            weights: Some(vec![1.0, 0.0, 1.0]),
            ..Default::default()
        };
        assert!(fit_path(&x, &y, &bad_w).is_err());
    }

    #[test]
    fn active_cap_stops_path() {
        let (x, y) = random_problem(100, 8, 6);
        let cfg = PenaltyConfig {
            max_active: 1,
            lambda_grid: LambdaGrid::Auto { n: 30, min_ratio: 1e-3 },
            ..Default::default()
        };
        let fit = fit_path(&x, &y, &cfg).unwrap();
        assert!(fit.hit_max_active);
        assert!(fit.path.iter().all(|p| p.coef.active() <= 1));
    }

    #[test]
    fn prediction_examples() {
        let zero = SparseCoefficients::intercept_only(0.0, 3);
        assert_eq!(predict_prob(&zero, &[(0, 2.0)]).unwrap(), 0.5);
        let shifted = SparseCoefficients::intercept_only(-7.4231, 3);
        let p = predict_prob(&shifted, &[]).unwrap();
        assert!((p - 5.969_381_111_566_68e-4).abs() < 1e-15, "{p}");
        assert!(predict_linear(&zero, &[(3, 1.0)]).is_err());
        let pos = SparseCoefficients {
            intercept: 0.1,
            ncols: 2,
            slopes: vec![(1, 0.7)],
        };
        let a = predict_prob(&pos, &[(1, 1.0)]).unwrap();
        let b = predict_prob(&pos, &[(1, 1.5)]).unwrap();
        assert!(b >= a);
        let unsorted = predict_linear(&pos, &[(1, 2.0), (0, 5.0)]).unwrap();
        assert!((unsorted - 1.5).abs() < 1e-15);
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let y: Vec<f64> = (0..53).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let a = stratified_folds(&y, 5, 9);
        assert_eq!(a, stratified_folds(&y, 5, 9));
        for f in 0..5 {
            let ones = (0..53).filter(|&i| a[i] == f && y[i] == 1.0).count();
            assert!((3..=4).contains(&ones));
        }
    }

    #[test]
    fn cv_is_deterministic() {
        let (x, y) = random_problem(60, 4, 7);
        let cfg = PenaltyConfig {
            lambda_grid: LambdaGrid::Auto { n: 15, min_ratio: 1e-2 },
            ..Default::default()
        };
        let cv = CvConfig {
            folds: 5,
            seed: 3,
            ..Default::default()
        };
        let a = cv_tune(&x, &y, &cfg, &cv).unwrap();
        let b = cv_tune(&x, &y, &cfg, &cv).unwrap();
        assert_eq!(a, b);
        assert!(a.best_lambda > 0.0);
    }
}
