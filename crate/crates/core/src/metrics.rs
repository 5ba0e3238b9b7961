//! Discrimination metrics: Harrell's C-index, IPCW cumulative/dynamic AUC(t),
//! its trapezoidal integral, and permutation feature importance.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("no events")]
    NoEvents,
    #[error("length mismatch")]
    LengthMismatch,
    #[error("AUC undefined at every grid point")]
    UndefinedEverywhere,
}

pub const AUC_GRID_POINTS: usize = 100;
/// Upper bound on an IPCW weight, `1/G <= MAX_IPCW_WEIGHT`.
pub const MAX_IPCW_WEIGHT: f64 = 100.0;

fn check_lengths(scores: &[f64], time: &[f64], event: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != time.len() || scores.len() != event.len() {
        Err(MetricsError::LengthMismatch)
    } else {
        Ok(())
    }
}

/// Concordant and comparable pair weights behind a C-index.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairCounts {
    pub concordant: f64,
    pub comparable: usize,
}

impl PairCounts {
    pub fn value(&self) -> Result<f64, MetricsError> {
        if self.comparable == 0 {
            Err(MetricsError::NoComparablePairs)
        } else {
            Ok(self.concordant / self.comparable as f64)
        }
    }
}

/// Pair accounting for Harrell's C. A pair is comparable when the earlier
/// time is an event, or when times tie and exactly one of the two is an
/// event (the event is taken as earlier). Tied event pairs are skipped.
/// Higher score means higher risk; tied scores earn half credit.
pub fn concordance_pairs(scores: &[f64], time: &[f64], event: &[bool]) -> Result<PairCounts, MetricsError> {
    check_lengths(scores, time, event)?;
    let n = scores.len();
    let mut out = PairCounts::default();
    for i in 0..n {
        if !event[i] {
            continue;
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let comparable = time[i] < time[j] || (time[i] == time[j] && !event[j]);
            if !comparable {
                continue;
            }
            out.comparable += 1;
            if scores[i] > scores[j] {
                out.concordant += 1.0;
            } else if scores[i] == scores[j] {
                out.concordant += 0.5;
            }
        }
    }
    Ok(out)
}

pub fn c_index(scores: &[f64], time: &[f64], event: &[bool]) -> Result<f64, MetricsError> {
    concordance_pairs(scores, time, event)?.value()
}

/// Kaplan-Meier estimate of the censoring survivor `G(t) = P(C > t)`,
/// obtained by flipping the event indicator. At tied times events are
/// taken to precede censorings.
#[derive(Debug, Clone)]
pub struct CensoringKm {
    times: Vec<f64>,
    surv: Vec<f64>,
}

impl CensoringKm {
    pub fn fit(time: &[f64], event: &[bool]) -> Self {
        let mut idx: Vec<usize> = (0..time.len()).collect();
        idx.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
        let mut at_risk = time.len() as f64;
        let mut s = 1.0;
        let (mut times, mut surv) = (Vec::new(), Vec::new());
        let mut k = 0;
        while k < idx.len() {
            let t = time[idx[k]];
            let mut censored = 0.0;
            let mut total = 0.0;
            while k < idx.len() && time[idx[k]] == t {
                if !event[idx[k]] {
                    censored += 1.0;
                }
                total += 1.0;
                k += 1;
            }
            if censored > 0.0 {
                s *= 1.0 - censored / at_risk;
                times.push(t);
                surv.push(s);
            }
            at_risk -= total;
        }
        Self { times, surv }
    }

    /// `G(t-)`: product over censoring times strictly before `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&c| c < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// `G(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&c| c <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucCurve {
    pub grid: Vec<f64>,
    /// `None` where no case or no control exists at that time.
    pub auc: Vec<Option<f64>>,
    pub iauc: f64,
}

impl AucCurve {
    pub fn defined_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid
            .iter()
            .zip(&self.auc)
            .filter_map(|(t, a)| a.map(|a| (*t, a)))
    }
}

pub fn time_grid(time: &[f64], points: usize) -> Vec<f64> {
    let lo = time.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = time.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect()
}

/// Cumulative/dynamic AUC at `t` with case weights `w_i`: cases are events
/// with `t_i <= t`, controls are subjects with `t_j > t`.
pub fn auc_at(scores: &[f64], time: &[f64], event: &[bool], case_weight: &[f64], t: f64) -> Option<f64> {
    let controls: Vec<usize> = (0..time.len()).filter(|&j| time[j] > t).collect();
    if controls.is_empty() {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..time.len() {
        if !(event[i] && time[i] <= t) {
            continue;
        }
        let mut wins = 0.0;
        for &j in &controls {
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
        num += case_weight[i] * wins;
        den += case_weight[i] * controls.len() as f64;
    }
    (den > 0.0).then(|| num / den)
}

/// Trapezoid over the defined points, normalized by the span they cover.
/// A single defined point integrates to itself.
pub fn trapezoid_mean(points: &[(f64, f64)]) -> Option<f64> {
    match points {
        [] => None,
        [(_, a)] => Some(*a),
        _ => {
            let span = points[points.len() - 1].0 - points[0].0;
            if span <= 0.0 {
                return Some(points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64);
            }
            let area: f64 = points
                .windows(2)
                .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
                .sum();
            Some(area / span)
        }
    }
}

/// IPCW time-dependent AUC on a 100-point grid spanning the observed times,
/// plus its integrated mean. Case `i` is weighted by `1/G(t_i-)`, capped at
/// [`MAX_IPCW_WEIGHT`].
pub fn auc_curve(scores: &[f64], time: &[f64], event: &[bool]) -> Result<AucCurve, MetricsError> {
    auc_curve_with_grid(scores, time, event, &time_grid(time, AUC_GRID_POINTS))
}

pub fn auc_curve_with_grid(scores: &[f64], time: &[f64], event: &[bool], grid: &[f64]) -> Result<AucCurve, MetricsError> {
    check_lengths(scores, time, event)?;
    if !event.iter().any(|e| *e) {
        return Err(MetricsError::NoEvents);
    }
    let g = CensoringKm::fit(time, event);
    let weights: Vec<f64> = time
        .iter()
        .map(|&t| (1.0 / g.left_limit(t)).min(MAX_IPCW_WEIGHT))
        .collect();
    let auc: Vec<Option<f64>> = grid
        .iter()
        .map(|&t| auc_at(scores, time, event, &weights, t))
        .collect();
    let defined: Vec<(f64, f64)> = grid
        .iter()
        .zip(&auc)
        .filter_map(|(t, a)| a.map(|a| (*t, a)))
        .collect();
    let iauc = trapezoid_mean(&defined).ok_or(MetricsError::UndefinedEverywhere)?;
    Ok(AucCurve {
        grid: grid.to_vec(),
        auc,
        iauc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub baseline_cindex: f64,
    pub repeats: usize,
    /// Same order as the dataset columns. Negative values are kept as-is.
    pub features: Vec<FeatureImportance>,
}

impl ImportanceReport {
    pub fn sorted_desc(&self) -> Vec<FeatureImportance> {
        let mut v = self.features.clone();
        v.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        v
    }
}

/// `importance_f = C(baseline) - mean_r C(column f permuted)`.
pub fn permutation_importance<F>(
    scorer: F,
    x: &Array2<f64>,
    feature_names: &[String],
    time: &[f64],
    event: &[bool],
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport, MetricsError>
where
    F: Fn(&Array2<f64>) -> Vec<f64>,
{
    let repeats = repeats.max(1);
    let baseline = c_index(&scorer(x), time, event)?;
    let mut features = Vec::with_capacity(x.ncols());
    for (f, name) in feature_names.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("perm/{name}"));
        let mut drops = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut perm: Vec<usize> = (0..x.nrows()).collect();
            perm.shuffle(&mut rng);
            let mut xp = x.clone();
            for (row, &src) in perm.iter().enumerate() {
                xp[[row, f]] = x[[src, f]];
            }
            drops.push(baseline - c_index(&scorer(&xp), time, event)?);
        }
        let mean = drops.iter().sum::<f64>() / repeats as f64;
        let sd = if repeats > 1 {
            (drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
        } else {
            0.0
        };
        features.push(FeatureImportance {
            feature: name.clone(),
            mean,
            sd,
        });
    }
    Ok(ImportanceReport {
        baseline_cindex: baseline,
        repeats,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true; 4];
        let s: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(c_index(&s, &t, &e).unwrap(), 1.0);
        assert_eq!(c_index(&[0.0; 4], &t, &e).unwrap(), 0.5);
    }

    #[test]
    fn no_comparable_pairs() {
        assert_eq!(
            c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(MetricsError::NoComparablePairs)
        );
        // tied events are not comparable
        assert_eq!(
            c_index(&[1.0, 2.0], &[1.0, 1.0], &[true, true]),
            Err(MetricsError::NoComparablePairs)
        );
    }

    #[test]
    fn censoring_km_left_limits() {
        // censorings at 2 (1 of 3 at risk) and 4 (1 of 1)
        let g = CensoringKm::fit(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, false]);
        assert_eq!(g.left_limit(2.0), 1.0);
        assert_eq!(g.at(2.0), 1.0 - 1.0 / 3.0);
        assert_eq!(g.left_limit(3.0), 1.0 - 1.0 / 3.0);
        assert_eq!(g.at(4.0), 0.0);
    }

    #[test]
    fn perfect_auc_without_censoring() {
        let t: Vec<f64> = (1..=30).map(f64::from).collect();
        let e = vec![true; 30];
        let s: Vec<f64> = t.iter().map(|v| -v).collect();
        let curve = auc_curve(&s, &t, &e).unwrap();
        assert!(curve.defined_points().all(|(_, a)| a == 1.0));
        assert_eq!(curve.iauc, 1.0);
        // last grid point has no controls
        assert!(curve.auc.last().unwrap().is_none());
    }

    #[test]
    fn trapezoid_constant_and_single() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (k as f64 * 0.37, 0.73)).collect();
        assert!((trapezoid_mean(&pts).unwrap() - 0.73).abs() < 1e-12);
        assert_eq!(trapezoid_mean(&[(3.0, 0.4)]), Some(0.4));
        assert_eq!(trapezoid_mean(&[]), None);
    }
}
