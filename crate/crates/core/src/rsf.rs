//! Random survival forest: bootstrap survival trees grown with the two-sample
//! log-rank split criterion, Nelson-Aalen cumulative hazards in the leaves,
//! and ensemble hazards averaged over trees.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SurvivalDataset;
use crate::seed::rng_for;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RsfError {
    #[error("need at least {needed} events to grow a forest, found {found}")]
    TooFewEvents { needed: usize, found: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsfParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    /// Each child of a split must keep at least this many events.
    pub min_node_events: usize,
    pub max_depth: Option<usize>,
    /// Random midpoints evaluated per feature and node.
    pub max_thresholds: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RsfParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_node_events: 3,
            max_depth: None,
            max_thresholds: 32,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Nelson-Aalen estimate over the given samples: distinct event times and
/// `H(t) = sum_{t_i <= t} d(t_i) / Y(t_i)` at each.
pub fn nelson_aalen(time: &[f64], event: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..time.len()).collect();
    idx.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut at_risk = time.len() as f64;
    let (mut times, mut cumhaz) = (Vec::new(), Vec::new());
    let mut h = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let t = time[idx[k]];
        let (mut deaths, mut total) = (0.0, 0.0);
        while k < idx.len() && time[idx[k]] == t {
            if event[idx[k]] {
                deaths += 1.0;
            }
            total += 1.0;
            k += 1;
        }
        if deaths > 0.0 {
            h += deaths / at_risk;
            times.push(t);
            cumhaz.push(h);
        }
        at_risk -= total;
    }
    (times, cumhaz)
}

/// Right-continuous step function evaluation; zero before the first jump.
pub fn step_value(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        0.0
    } else {
        values[k - 1]
    }
}

/// Absolute standardized two-sample log-rank statistic. `time_order` must
/// list the samples by ascending time.
pub fn log_rank_statistic(time: &[f64], event: &[bool], time_order: &[usize], left: impl Fn(usize) -> bool) -> f64 {
    let mut y = time_order.len() as f64;
    let mut y_left = time_order.iter().filter(|&&i| left(i)).count() as f64;
    let (mut num, mut var) = (0.0, 0.0);
    let mut k = 0;
    while k < time_order.len() {
        let t = time[time_order[k]];
        let (mut d, mut d_left, mut n_t, mut n_t_left) = (0.0, 0.0, 0.0, 0.0);
        while k < time_order.len() && time[time_order[k]] == t {
            let i = time_order[k];
            let is_left = left(i);
            if event[i] {
                d += 1.0;
                if is_left {
                    d_left += 1.0;
                }
            }
            n_t += 1.0;
            if is_left {
                n_t_left += 1.0;
            }
            k += 1;
        }
        if d > 0.0 {
            let frac = y_left / y;
            num += d_left - d * frac;
            if y > 1.0 {
                var += d * frac * (1.0 - frac) * (y - d) / (y - 1.0);
            }
        }
        y -= n_t;
        y_left -= n_t_left;
    }
    if var > 0.0 {
        num.abs() / var.sqrt()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        times: Vec<f64>,
        cumhaz: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl SurvivalTree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return k,
            }
        }
    }

    pub fn cumhaz(&self, x: &[f64], t: f64) -> f64 {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { times, cumhaz } => step_value(times, cumhaz, t),
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfModel {
    pub version: u32,
    pub params: RsfParams,
    pub mtry: usize,
    pub n_features: usize,
    /// Largest event time seen in training; the risk score horizon.
    pub t_max: f64,
    pub trees: Vec<SurvivalTree>,
}

impl RsfModel {
    /// `H_RSF(t|x) = (1/B) sum_b H_b(t|x)`.
    pub fn predict_cumhaz(&self, x: &[f64], t: f64) -> f64 {
        self.trees.iter().map(|tr| tr.cumhaz(x, t)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_survival(&self, x: &[f64], t: f64) -> f64 {
        (-self.predict_cumhaz(x, t)).exp()
    }

    /// Terminal cumulative hazard; higher means riskier.
    pub fn risk_score(&self, x: &[f64]) -> f64 {
        self.predict_cumhaz(x, self.t_max)
    }

    pub fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(row) => self.risk_score(row),
                None => self.risk_score(&r.to_vec()),
            })
            .collect()
    }
}

/// Draw `n` row indices with replacement.
pub fn bootstrap_sample(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

struct Grower<'a> {
    x: &'a Array2<f64>,
    time: &'a [f64],
    event: &'a [bool],
    mtry: usize,
    params: &'a RsfParams,
}

impl Grower<'_> {
    fn leaf(&self, samples: &[usize]) -> Node {
        let t: Vec<f64> = samples.iter().map(|&i| self.time[i]).collect();
        let e: Vec<bool> = samples.iter().map(|&i| self.event[i]).collect();
        let (times, cumhaz) = nelson_aalen(&t, &e);
        Node::Leaf { times, cumhaz }
    }

    fn best_split(&self, samples: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let min_ev = self.params.min_node_events.max(1);
        let mut by_time = samples.to_vec();
        by_time.sort_by(|&a, &b| self.time[a].total_cmp(&self.time[b]));
        let p = self.x.ncols();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, p, self.mtry.min(p)).into_iter() {
            let mut values: Vec<f64> = samples.iter().map(|&i| self.x[[i, f]]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            if values.len() < 2 {
                continue;
            }
            let mut mids: Vec<f64> = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            if mids.len() > self.params.max_thresholds {
                let mut pick: Vec<usize> = sample(rng, mids.len(), self.params.max_thresholds).into_vec();
                pick.sort_unstable();
                mids = pick.into_iter().map(|k| mids[k]).collect();
            }
            for thr in mids {
                let left = |i: usize| self.x[[i, f]] <= thr;
                let left_events = samples.iter().filter(|&&i| self.event[i] && left(i)).count();
                let total_events = samples.iter().filter(|&&i| self.event[i]).count();
                if left_events < min_ev || total_events - left_events < min_ev {
                    continue;
                }
                let stat = log_rank_statistic(self.time, self.event, &by_time, left);
                if best.map_or(true, |(s, _, _)| stat > s) {
                    best = Some((stat, f, thr));
                }
            }
        }
        best.map(|(_, f, thr)| (f, thr))
    }

    fn grow(&self, root: Vec<usize>, rng: &mut ChaCha8Rng) -> SurvivalTree {
        let mut nodes: Vec<Node> = Vec::new();
        // (node slot, samples, depth)
        let mut stack = vec![(0usize, root, 0usize)];
        nodes.push(Node::Leaf {
            times: Vec::new(),
            cumhaz: Vec::new(),
        });
        while let Some((slot, samples, depth)) = stack.pop() {
            let events = samples.iter().filter(|&&i| self.event[i]).count();
            let depth_ok = self.params.max_depth.map_or(true, |d| depth < d);
            let first = self.time[samples[0]];
            let pure = samples.iter().all(|&i| self.time[i] == first);
            let split = if depth_ok && !pure && events >= 2 * self.params.min_node_events.max(1) {
                self.best_split(&samples, rng)
            } else {
                None
            };
            match split {
                Some((feature, threshold)) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        samples.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
                    let left = nodes.len();
                    let right = left + 1;
                    for _ in 0..2 {
                        nodes.push(Node::Leaf {
                            times: Vec::new(),
                            cumhaz: Vec::new(),
                        });
                    }
                    nodes[slot] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
                None => nodes[slot] = self.leaf(&samples),
            }
        }
        SurvivalTree { nodes }
    }
}

pub fn fit_rsf(ds: &SurvivalDataset, params: &RsfParams) -> Result<RsfModel, RsfError> {
    if params.n_trees == 0 {
        return Err(RsfError::InvalidParams("n_trees must be at least 1".into()));
    }
    let p = ds.p();
    if p == 0 {
        return Err(RsfError::InvalidParams("dataset has no features".into()));
    }
    let mtry = params.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize);
    if mtry == 0 || mtry > p {
        return Err(RsfError::InvalidParams(format!("mtry must lie in 1..={p}")));
    }
    let found = ds.n_events();
    let needed = params.min_node_events.max(1);
    if found < needed {
        return Err(RsfError::TooFewEvents { needed, found });
    }
    let x = ds.x.as_standard_layout().into_owned();
    let grower = Grower {
        x: &x,
        time: &ds.time,
        event: &ds.event,
        mtry,
        params,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(params.seed, &format!("rsf/tree/{b}"));
            let rows = if params.bootstrap {
                bootstrap_sample(ds.n(), &mut rng)
            } else {
                (0..ds.n()).collect()
            };
            grower.grow(rows, &mut rng)
        })
        .collect();
    let t_max = ds
        .time
        .iter()
        .zip(&ds.event)
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RsfModel {
        version: MODEL_VERSION,
        params: params.clone(),
        mtry,
        n_features: p,
        t_max,
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelson_aalen_hand_values() {
        let (t, h) = nelson_aalen(&[2.0, 3.0, 5.0], &[true, false, true]);
        assert_eq!(t, vec![2.0, 5.0]);
        assert_eq!(h, vec![1.0 / 3.0, 1.0 / 3.0 + 1.0]);
        assert_eq!(step_value(&t, &h, 0.0), 0.0);
        assert_eq!(step_value(&t, &h, 4.9), 1.0 / 3.0);
        assert_eq!(step_value(&t, &h, 5.0), 4.0 / 3.0);
    }

    #[test]
    fn all_censored_leaf_is_flat() {
        let (t, h) = nelson_aalen(&[1.0, 2.0], &[false, false]);
        assert!(t.is_empty() && h.is_empty());
        assert_eq!(step_value(&t, &h, 10.0), 0.0);
    }

    #[test]
    fn log_rank_symmetric() {
        let time = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let event = [true, true, false, true, true, false];
        let order: Vec<usize> = (0..6).collect();
        let a = log_rank_statistic(&time, &event, &order, |i| i < 3);
        let b = log_rank_statistic(&time, &event, &order, |i| i >= 3);
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_params() {
        let ds = SurvivalDataset::new(
            Array2::zeros((3, 1)),
            vec!["a".into()],
            vec![1.0, 2.0, 3.0],
            vec![false, false, true],
            vec!["1".into(), "2".into(), "3".into()],
        )
        .unwrap();
        assert!(matches!(
            fit_rsf(&ds, &RsfParams::default()),
            Err(RsfError::TooFewEvents { needed: 3, found: 1 })
        ));
        let p = RsfParams {
            mtry: Some(2),
            min_node_events: 1,
            ..RsfParams::default()
        };
        assert!(matches!(fit_rsf(&ds, &p), Err(RsfError::InvalidParams(_))));
    }
}
