//! Gradient-boosted regression trees on the Cox partial likelihood, using
//! second-order (g, h) statistics and the regularized objective
//! `sum [g f + h f^2 / 2] + gamma T + lambda/2 sum w^2`.

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{grad_hess_with_order, nll_with_order, RiskOrder};
use crate::dataset::SurvivalDataset;
use crate::seed::rng_for;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbcoxError {
    #[error("no events: the partial likelihood is undefined")]
    NoEvents,
    #[error("invalid boosting parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbcoxParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub gamma: f64,
    pub lambda_l2: f64,
    /// Minimum hessian mass per child.
    pub min_child_weight: f64,
    /// Row fraction drawn (without replacement) per round; 1 uses every row.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbcoxParams {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            learning_rate: 0.1,
            max_depth: 3,
            gamma: 0.0,
            lambda_l2: 1.0,
            min_child_weight: 1.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbcoxParams {
    fn validate(&self) -> Result<(), GbcoxError> {
        let bad = |m: &str| Err(GbcoxError::InvalidParams(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.gamma >= 0.0) || !(self.lambda_l2 >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("gamma, lambda_l2 and min_child_weight must be nonnegative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        Ok(())
    }
}

/// `w = -G / (H + lambda)`, the minimizer of `G w + (H + lambda) w^2 / 2`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    assert!(denom > 0.0, "degenerate hessian: H + lambda = {denom}");
    -g / denom
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Second-order split gain; positive gains improve the regularized objective.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - score(gl + gr, hl + hr, lambda)) - gamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GbNode {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTree {
    pub nodes: Vec<GbNode>,
}

impl RegTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                GbNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => k = if x[*feature] <= *threshold { *left } else { *right },
                GbNode::Leaf { weight } => return *weight,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, GbNode::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Exact greedy search over every midpoint between distinct feature values
/// among `rows`. `sorted[f]` lists all rows by ascending `x[., f]`;
/// `in_node` marks the members of `rows`. Returns the best candidate with
/// both children meeting `min_child_weight`, whatever its gain.
pub fn best_split(
    x: &Array2<f64>,
    g: &[f64],
    h: &[f64],
    sorted: &[Vec<usize>],
    in_node: &[bool],
    params: &GbcoxParams,
) -> Option<SplitCandidate> {
    let (mut gt, mut ht) = (0.0, 0.0);
    for (i, &inside) in in_node.iter().enumerate() {
        if inside {
            gt += g[i];
            ht += h[i];
        }
    }
    let mut best: Option<SplitCandidate> = None;
    for (f, order) in sorted.iter().enumerate() {
        let (mut gl, mut hl) = (0.0, 0.0);
        let mut prev: Option<usize> = None;
        for &i in order.iter().filter(|&&i| in_node[i]) {
            if let Some(pi) = prev {
                let (a, b) = (x[[pi, f]], x[[i, f]]);
                if a < b && hl >= params.min_child_weight && ht - hl >= params.min_child_weight {
                    let gain = split_gain(gl, hl, gt - gl, ht - hl, params.lambda_l2, params.gamma);
                    if best.map_or(true, |c| gain > c.gain) {
                        best = Some(SplitCandidate {
                            feature: f,
                            threshold: 0.5 * (a + b),
                            gain,
                        });
                    }
                }
            }
            gl += g[i];
            hl += h[i];
            prev = Some(i);
        }
    }
    best
}

fn grow_tree(x: &Array2<f64>, g: &[f64], h: &[f64], sorted: &[Vec<usize>], rows: Vec<usize>, params: &GbcoxParams) -> RegTree {
    let n = x.nrows();
    let mut nodes = vec![GbNode::Leaf { weight: 0.0 }];
    let mut stack = vec![(0usize, rows, 0usize)];
    let mut in_node = vec![false; n];
    while let Some((slot, rows, depth)) = stack.pop() {
        let gs: f64 = rows.iter().map(|&i| g[i]).sum();
        let hs: f64 = rows.iter().map(|&i| h[i]).sum();
        let mut split = None;
        if depth < params.max_depth && rows.len() >= 2 {
            rows.iter().for_each(|&i| in_node[i] = true);
            split = best_split(x, g, h, sorted, &in_node, params).filter(|c| c.gain > 0.0);
            rows.iter().for_each(|&i| in_node[i] = false);
        }
        match split {
            Some(c) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, c.feature]] <= c.threshold);
                let left = nodes.len();
                nodes.push(GbNode::Leaf { weight: 0.0 });
                nodes.push(GbNode::Leaf { weight: 0.0 });
                nodes[slot] = GbNode::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    gain: c.gain,
                    left,
                    right: left + 1,
                };
                stack.push((left + 1, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
            None => {
                nodes[slot] = GbNode::Leaf {
                    weight: leaf_weight(gs, hs, params.lambda_l2),
                }
            }
        }
    }
    RegTree { nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbcoxModel {
    pub version: u32,
    pub params: GbcoxParams,
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<RegTree>,
    /// Training `cox_nll` before the first round and after each round.
    pub train_loss_trace: Vec<f64>,
}

impl GbcoxModel {
    /// `eta(x) = base_score + learning_rate * sum_m f_m(x)`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score + self.params.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn risk_score(&self, x: &[f64]) -> f64 {
        self.predict(x)
    }

    pub fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.predict(&r.to_vec())).collect()
    }
}

pub fn fit_gbcox(ds: &SurvivalDataset, params: &GbcoxParams) -> Result<GbcoxModel, GbcoxError> {
    params.validate()?;
    if ds.n_events() == 0 {
        return Err(GbcoxError::NoEvents);
    }
    let n = ds.n();
    let x = ds.x.to_owned();
    let sorted: Vec<Vec<usize>> = (0..ds.p())
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
            idx
        })
        .collect();
    let order = RiskOrder::new(&ds.time, &ds.event);
    let base_score = 0.0;
    let mut eta = vec![base_score; n];
    let mut trace = vec![nll_with_order(&order, &eta, &ds.event)];
    let mut rng = rng_for(params.seed, "gbcox/subsample");
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        let (g, h) = grad_hess_with_order(&order, &eta, &ds.event);
        debug_assert!(h.iter().all(|v| *v >= 0.0));
        let rows: Vec<usize> = if params.subsample < 1.0 {
            let k = ((n as f64 * params.subsample).round() as usize).clamp(1, n);
            let mut r = sample(&mut rng, n, k).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let tree = grow_tree(&x, &g, &h, &sorted, rows, params);
        for (i, e) in eta.iter_mut().enumerate() {
            *e += params.learning_rate * tree.predict(&x.row(i).to_vec());
        }
        trace.push(nll_with_order(&order, &eta, &ds.event));
        trees.push(tree);
    }
    Ok(GbcoxModel {
        version: MODEL_VERSION,
        params: params.clone(),
        n_features: ds.p(),
        base_score,
        trees,
        train_loss_trace: trace,
    })
}
