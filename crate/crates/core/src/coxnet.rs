//! Penalized Cox regression (LASSO / Elastic Net) by cyclic coordinate
//! descent, used for feature selection.
//!
//! The objective is
//! `F(beta) = -l(beta)/n + lambda * [alpha*|beta|_1 + (1-alpha)/2*|beta|_2^2]`
//! with `l` the Breslow log partial likelihood. Each coordinate update
//! minimizes the exact second-order expansion of `-l/n` in that coordinate:
//! `beta_j <- S(d_j*beta_j - g_j, lambda*alpha) / (d_j + lambda*(1-alpha))`,
//! halving the step whenever the true objective would increase.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{nll_with_order, RiskOrder};
use crate::dataset::SurvivalDataset;
use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxnetError {
    #[error("no events in the data")]
    NoEvents,
    #[error("coordinate descent did not converge within {0} sweeps")]
    NonConvergence(usize),
    #[error("lambda grid must be non-empty, nonnegative and descending")]
    BadGrid,
    #[error("alpha must lie in [0, 1]")]
    BadAlpha,
    #[error("need at least {0} rows for {0}-fold cross-validation")]
    TooFewRows(usize),
    #[error("the fit selected no features")]
    EmptySelection,
    #[error("dataset features do not match the fit")]
    FeatureMismatch,
}

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
pub const DEFAULT_N_LAMBDA: usize = 100;
pub const DEFAULT_LAMBDA_MIN_RATIO: f64 = 1e-3;
pub const DEFAULT_ELASTIC_NET_ALPHA: f64 = 0.5;
/// Floor on alpha when computing `lambda_max` (ridge has no finite one).
const ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxnetFit {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    /// Nonzero support of `beta`, ascending.
    pub selected: Vec<usize>,
    pub path: Vec<PathPoint>,
    /// Summed held-out log partial likelihood per lambda, when CV ran.
    pub cv_score: Option<Vec<f64>>,
}

impl CoxnetFit {
    pub fn selected_names(&self) -> Vec<String> {
        self.selected.iter().map(|&j| self.feature_names[j].clone()).collect()
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Working state of one coordinate-descent problem.
pub(crate) struct CoxProblem {
    cols: Vec<Vec<f64>>,
    event: Vec<bool>,
    order: RiskOrder,
    n: usize,
}

impl CoxProblem {
    pub(crate) fn new(x: &Array2<f64>, time: &[f64], event: &[bool]) -> Self {
        let cols = (0..x.ncols()).map(|j| x.column(j).to_vec()).collect();
        Self {
            cols,
            event: event.to_vec(),
            order: RiskOrder::new(time, event),
            n: x.nrows(),
        }
    }

    fn p(&self) -> usize {
        self.cols.len()
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (col, b) in self.cols.iter().zip(beta) {
            if *b != 0.0 {
                for (e, x) in eta.iter_mut().zip(col) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    /// Scaled negative log partial likelihood `-l/n`.
    fn loss(&self, eta: &[f64]) -> f64 {
        nll_with_order(&self.order, eta, &self.event) / self.n as f64
    }

    /// First and second derivative of `-l/n` along coordinate `j`, using
    /// cached `w_i = exp(eta_i - shift)`.
    fn coord_derivs(&self, j: usize, w: &[f64]) -> (f64, f64) {
        let x = &self.cols[j];
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let (mut g, mut d) = (0.0, 0.0);
        for &(a, b) in &self.order.groups {
            for &i in &self.order.desc[a..b] {
                let wi = w[i];
                s0 += wi;
                s1 += wi * x[i];
                s2 += wi * x[i] * x[i];
            }
            let mean = s1 / s0;
            let second = s2 / s0 - mean * mean;
            for &i in &self.order.desc[a..b] {
                if self.event[i] {
                    g += mean - x[i];
                    d += second;
                }
            }
        }
        let n = self.n as f64;
        (g / n, (d / n).max(0.0))
    }

    /// Gradient of `-l/n` at `beta = 0`.
    fn gradient_at_zero(&self) -> Vec<f64> {
        let w = vec![1.0; self.n];
        (0..self.p()).map(|j| self.coord_derivs(j, &w).0).collect()
    }
}

fn penalty(beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    lambda * (alpha * l1 + 0.5 * (1.0 - alpha) * l2)
}

/// Penalized objective `-l/n + lambda*P_alpha(beta)` at `beta`.
pub fn penalized_objective(ds: &SurvivalDataset, beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    let prob = CoxProblem::new(&ds.x, &ds.time, &ds.event);
    prob.loss(&prob.eta(beta)) + penalty(beta, lambda, alpha)
}

struct Solver<'a> {
    prob: &'a CoxProblem,
    lambda: f64,
    alpha: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    w: Vec<f64>,
    shift: f64,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a CoxProblem, lambda: f64, alpha: f64, warm: Option<&[f64]>) -> Self {
        let beta = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; prob.p()]);
        let eta = prob.eta(&beta);
        let mut s = Self {
            prob,
            lambda,
            alpha,
            beta,
            eta,
            w: Vec::new(),
            shift: 0.0,
        };
        s.refresh_weights();
        s
    }

    fn refresh_weights(&mut self) {
        self.shift = self.eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.w = self.eta.iter().map(|e| (e - self.shift).exp()).collect();
    }

    fn objective(&self) -> f64 {
        self.prob.loss(&self.eta) + penalty(&self.beta, self.lambda, self.alpha)
    }

    fn objective_with(&self, j: usize, b: f64) -> f64 {
        let delta = b - self.beta[j];
        let x = &self.prob.cols[j];
        let eta: Vec<f64> = self.eta.iter().zip(x).map(|(e, xi)| e + delta * xi).collect();
        let mut beta = self.beta.clone();
        beta[j] = b;
        self.prob.loss(&eta) + penalty(&beta, self.lambda, self.alpha)
    }

    fn set_coord(&mut self, j: usize, b: f64) {
        let delta = b - self.beta[j];
        if delta == 0.0 {
            return;
        }
        self.beta[j] = b;
        let x = &self.prob.cols[j];
        for i in 0..self.eta.len() {
            self.eta[i] += delta * x[i];
            self.w[i] *= (delta * x[i]).exp();
        }
    }

    /// One coordinate update; returns the absolute change.
    fn update(&mut self, j: usize) -> f64 {
        let (g, d) = self.prob.coord_derivs(j, &self.w);
        let denom = d + self.lambda * (1.0 - self.alpha);
        if !(denom > 1e-15) {
            return 0.0;
        }
        let old = self.beta[j];
        let target = soft_threshold(d * old - g, self.lambda * self.alpha) / denom;
        if target == old {
            return 0.0;
        }
        let current = self.objective();
        let mut b = target;
        let mut accepted = false;
        for _ in 0..40 {
            if self.objective_with(j, b) <= current + 1e-15 * current.abs().max(1.0) {
                accepted = true;
                break;
            }
            b = 0.5 * (old + b);
        }
        if !accepted {
            return 0.0;
        }
        self.set_coord(j, b);
        (b - old).abs()
    }

    fn sweep(&mut self, coords: &[usize]) -> f64 {
        let mut max_change: f64 = 0.0;
        for &j in coords {
            max_change = max_change.max(self.update(j));
        }
        self.refresh_weights();
        max_change
    }

    /// Active-set cycling: full sweep, then sweeps over the nonzero
    /// coordinates until they settle, repeated until a full sweep is quiet.
    fn run(&mut self, opts: &SolverOptions, mut trace: Option<&mut Vec<f64>>) -> Result<usize, CoxnetError> {
        let all: Vec<usize> = (0..self.prob.p()).collect();
        let mut sweeps = 0;
        loop {
            let change = self.sweep(&all);
            sweeps += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective());
            }
            if change < opts.tol {
                return Ok(sweeps);
            }
            loop {
                if sweeps >= opts.max_sweeps {
                    return Err(CoxnetError::NonConvergence(opts.max_sweeps));
                }
                let active: Vec<usize> = all.iter().copied().filter(|&j| self.beta[j] != 0.0).collect();
                let change = self.sweep(&active);
                sweeps += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(self.objective());
                }
                if change < opts.tol {
                    break;
                }
            }
            if sweeps >= opts.max_sweeps {
                return Err(CoxnetError::NonConvergence(opts.max_sweeps));
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), CoxnetError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(CoxnetError::BadAlpha)
    }
}

/// Fit at a single lambda, optionally warm-started.
pub fn fit_single(
    ds: &SurvivalDataset,
    alpha: f64,
    lambda: f64,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<Vec<f64>, CoxnetError> {
    check_alpha(alpha)?;
    if ds.n_events() == 0 {
        return Err(CoxnetError::NoEvents);
    }
    let prob = CoxProblem::new(&ds.x, &ds.time, &ds.event);
    let mut solver = Solver::new(&prob, lambda, alpha, warm);
    solver.run(opts, None)?;
    Ok(solver.beta)
}

/// Like [`fit_single`] but also returns the objective after every sweep.
pub fn fit_single_traced(
    ds: &SurvivalDataset,
    alpha: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Vec<f64>), CoxnetError> {
    check_alpha(alpha)?;
    if ds.n_events() == 0 {
        return Err(CoxnetError::NoEvents);
    }
    let prob = CoxProblem::new(&ds.x, &ds.time, &ds.event);
    let mut solver = Solver::new(&prob, lambda, alpha, None);
    let mut trace = vec![solver.objective()];
    solver.run(opts, Some(&mut trace))?;
    Ok((solver.beta, trace))
}

/// Smallest lambda at which every coefficient is zero.
pub fn lambda_max(ds: &SurvivalDataset, alpha: f64) -> f64 {
    let prob = CoxProblem::new(&ds.x, &ds.time, &ds.event);
    let g = prob.gradient_at_zero();
    g.iter().map(|v| v.abs()).fold(0.0, f64::max) / alpha.max(ALPHA_FLOOR)
}

/// `n_lambda` log-spaced values from `lambda_max` down to
/// `min_ratio * lambda_max`.
pub fn default_lambda_grid(ds: &SurvivalDataset, alpha: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    let hi = lambda_max(ds, alpha).max(1e-12);
    if n_lambda <= 1 {
        return vec![hi];
    }
    let lo = hi * min_ratio;
    (0..n_lambda)
        .map(|k| (hi.ln() + (lo.ln() - hi.ln()) * k as f64 / (n_lambda - 1) as f64).exp())
        .collect()
}

/// Warm-started fits down the grid. Near-separable data can make the small-λ
/// end diverge; the path then stops at the last converged λ, so the result
/// may be shorter than `grid`.
fn fit_path(prob: &CoxProblem, alpha: f64, grid: &[f64], opts: &SolverOptions) -> Result<Vec<Vec<f64>>, CoxnetError> {
    let mut warm: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut solver = Solver::new(prob, lambda, alpha, warm.as_deref());
        match solver.run(opts, None) {
            Ok(_) => {}
            Err(CoxnetError::NonConvergence(_)) if !out.is_empty() => {
                log::warn!("coxnet path truncated at lambda {lambda:.3e}: no convergence");
                break;
            }
            Err(e) => return Err(e),
        }
        warm = Some(solver.beta.clone());
        out.push(solver.beta);
    }
    Ok(out)
}

/// Event-stratified fold labels.
pub fn stratified_folds(event: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "folds");
    let mut labels = vec![0; event.len()];
    for flag in [true, false] {
        let mut idx: Vec<usize> = (0..event.len()).filter(|&i| event[i] == flag).collect();
        idx.shuffle(&mut rng);
        for (r, i) in idx.into_iter().enumerate() {
            labels[i] = r % k;
        }
    }
    labels
}

/// Fit along `lambda_grid`; with more than one lambda, pick the one that
/// maximizes the cross-validated partial likelihood
/// `sum_k [l_full(beta_{-k}) - l_{-k}(beta_{-k})]`.
pub fn fit_coxnet(
    ds: &SurvivalDataset,
    alpha: f64,
    lambda_grid: &[f64],
    cv_folds: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<CoxnetFit, CoxnetError> {
    check_alpha(alpha)?;
    if lambda_grid.is_empty()
        || lambda_grid.iter().any(|l| !(*l >= 0.0))
        || lambda_grid.windows(2).any(|w| w[1] > w[0])
    {
        return Err(CoxnetError::BadGrid);
    }
    if ds.n_events() == 0 {
        return Err(CoxnetError::NoEvents);
    }
    let full = CoxProblem::new(&ds.x, &ds.time, &ds.event);
    let mut path = fit_path(&full, alpha, lambda_grid, opts)?;

    let (best, cv_score) = if lambda_grid.len() > 1 && cv_folds >= 2 {
        if ds.n() < cv_folds {
            return Err(CoxnetError::TooFewRows(cv_folds));
        }
        let labels = stratified_folds(&ds.event, cv_folds, seed);
        let mut score = vec![0.0; path.len()];
        for k in 0..cv_folds {
            let train_rows: Vec<usize> = (0..ds.n()).filter(|&i| labels[i] != k).collect();
            let train = ds.subset_rows(&train_rows);
            if train.n_events() == 0 {
                return Err(CoxnetError::NoEvents);
            }
            let prob = CoxProblem::new(&train.x, &train.time, &train.event);
            let betas = fit_path(&prob, alpha, &lambda_grid[..score.len()], opts)?;
            score.truncate(betas.len());
            for (s, beta) in score.iter_mut().zip(&betas) {
                let l_full = -full.loss(&full.eta(beta)) * full.n as f64;
                let l_train = -prob.loss(&prob.eta(beta)) * prob.n as f64;
                *s += l_full - l_train;
            }
        }
        let best = score
            .iter()
            .enumerate()
            .fold(0, |b, (k, s)| if *s > score[b] { k } else { b });
        (best, Some(score))
    } else {
        (path.len() - 1, None)
    };
    path.truncate(cv_score.as_ref().map_or(path.len(), Vec::len));

    let beta = path[best].clone();
    let selected = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    Ok(CoxnetFit {
        feature_names: ds.feature_names.clone(),
        beta,
        lambda: lambda_grid[best],
        alpha,
        selected,
        path: lambda_grid
            .iter()
            .zip(path)
            .map(|(&lambda, beta)| PathPoint { lambda, beta })
            .collect(),
        cv_score,
    })
}

/// Restrict `ds` to the selected columns, order preserved.
pub fn select_features(fit: &CoxnetFit, ds: &SurvivalDataset) -> Result<SurvivalDataset, CoxnetError> {
    if ds.feature_names != fit.feature_names {
        return Err(CoxnetError::FeatureMismatch);
    }
    if fit.selected.is_empty() {
        return Err(CoxnetError::EmptySelection);
    }
    Ok(ds.select_columns(&fit.selected))
}

/// Fallback when the CV-optimal fit is empty: the first `k` features to enter
/// along the path, ties broken by `|beta|` at the end of the path.
pub fn path_top_k(fit: &CoxnetFit, k: usize) -> Vec<usize> {
    let p = fit.feature_names.len();
    let last = fit.path.last().map(|pt| pt.beta.clone()).unwrap_or_else(|| vec![0.0; p]);
    let entry: Vec<usize> = (0..p)
        .map(|j| {
            fit.path
                .iter()
                .position(|pt| pt.beta[j] != 0.0)
                .unwrap_or(usize::MAX)
        })
        .collect();
    let mut order: Vec<usize> = (0..p).filter(|&j| entry[j] != usize::MAX).collect();
    order.sort_by(|&a, &b| {
        entry[a]
            .cmp(&entry[b])
            .then(last[b].abs().total_cmp(&last[a].abs()))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}
