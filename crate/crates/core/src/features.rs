//! Scenario design matrices and train-fitted standardization.
//!
//! Feature order is: baseline covariates (static value, visit-0 value, or a
//! full one-hot block), then `<name>_d01` rates for every longitudinal
//! covariate, then `<name>_d12`. Each scenario's columns are therefore a
//! prefix of the next one's.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CohortTable, DatasetError, FeatureKind, SurvivalDataset};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot fit a standardizer on an empty training set")]
    EmptyTrain,
    #[error("dataset features do not match the fitted spec (expected `{expected}`, found `{found}`)")]
    FeatureMismatch { expected: String, found: String },
    #[error("unknown scenario `{0}` (expected baseline, 2visits or 3visits)")]
    UnknownScenario(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub const DELTA01_SUFFIX: &str = "_d01";
pub const DELTA12_SUFFIX: &str = "_d12";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "baseline")]
    BaselineOnly,
    #[serde(rename = "2visits")]
    TwoVisits,
    #[serde(rename = "3visits")]
    ThreeVisits,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::BaselineOnly, Scenario::TwoVisits, Scenario::ThreeVisits];

    pub fn visits(self) -> usize {
        match self {
            Scenario::BaselineOnly => 1,
            Scenario::TwoVisits => 2,
            Scenario::ThreeVisits => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::BaselineOnly => "baseline",
            Scenario::TwoVisits => "2visits",
            Scenario::ThreeVisits => "3visits",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Scenario::BaselineOnly),
            "2visits" => Ok(Scenario::TwoVisits),
            "3visits" => Ok(Scenario::ThreeVisits),
            other => Err(FeatureError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    /// Subjects whose consecutive visits share a timestamp (delta left missing).
    pub zero_intervals: usize,
    /// Delta cells left missing because a visit or a value was absent.
    pub missing_deltas: usize,
}

/// Design matrix before imputation; NaN marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    pub feature_names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub ids: Vec<String>,
    pub report: DesignReport,
}

impl DesignMatrix {
    pub fn n_missing(&self) -> usize {
        self.x.iter().filter(|v| !v.is_finite()).count()
    }

    /// Attach completed values (same shape) to produce a dataset.
    pub fn complete(&self, x: Array2<f64>) -> Result<SurvivalDataset, FeatureError> {
        Ok(SurvivalDataset::with_kinds(
            x,
            self.feature_names.clone(),
            self.kinds.clone(),
            self.time.clone(),
            self.event.clone(),
            self.ids.clone(),
        )?)
    }
}

fn delta(values: &[Option<f64>], times: &[f64], from: usize, to: usize) -> Result<Option<f64>, ()> {
    match (values.get(from).copied().flatten(), values.get(to).copied().flatten()) {
        (Some(a), Some(b)) => {
            let dt = times[to] - times[from];
            if dt == 0.0 {
                Err(())
            } else {
                Ok(Some((b - a) / dt))
            }
        }
        _ => Ok(None),
    }
}

/// Build the scenario's design. Deltas are `(x_{k+1} - x_k) / (t_{k+1} - t_k)`
/// where both values are observed and missing otherwise.
pub fn build_design(c: &CohortTable, s: Scenario) -> DesignMatrix {
    let names = c.covariate_names();
    let longitudinal: Vec<usize> = (0..names.len()).filter(|&j| c.is_longitudinal(j)).collect();
    // levels of each categorical, sorted
    let levels: Vec<Vec<f64>> = (0..names.len())
        .map(|j| {
            if !c.is_categorical(j) {
                return Vec::new();
            }
            let mut lv: Vec<f64> = c.subjects().iter().filter_map(|s| s.first_observed(j)).collect();
            lv.sort_by(f64::total_cmp);
            lv.dedup();
            lv
        })
        .collect();

    let mut feature_names = Vec::new();
    let mut kinds = Vec::new();
    for (j, name) in names.iter().enumerate() {
        if c.is_categorical(j) {
            for l in &levels[j] {
                feature_names.push(format!("{name}={l}"));
                kinds.push(FeatureKind::OneHot);
            }
        } else {
            feature_names.push(name.clone());
            kinds.push(FeatureKind::Numeric);
        }
    }
    let intervals: &[(usize, usize, &str)] = match s {
        Scenario::BaselineOnly => &[],
        Scenario::TwoVisits => &[(0, 1, DELTA01_SUFFIX)],
        Scenario::ThreeVisits => &[(0, 1, DELTA01_SUFFIX), (1, 2, DELTA12_SUFFIX)],
    };
    for &(_, _, suffix) in intervals {
        for &j in &longitudinal {
            feature_names.push(format!("{}{suffix}", names[j]));
            kinds.push(FeatureKind::Numeric);
        }
    }

    let n = c.len();
    let p = feature_names.len();
    let mut x = Array2::from_elem((n, p), f64::NAN);
    let mut report = DesignReport::default();
    for (i, subj) in c.subjects().iter().enumerate() {
        let base = &subj.visits[0].values;
        let mut col = 0;
        for j in 0..names.len() {
            if c.is_categorical(j) {
                if let Some(v) = subj.first_observed(j) {
                    for (k, l) in levels[j].iter().enumerate() {
                        x[[i, col + k]] = if *l == v { 1.0 } else { 0.0 };
                    }
                }
                col += levels[j].len();
            } else {
                let v = if c.is_longitudinal(j) { base[j] } else { subj.first_observed(j) };
                x[[i, col]] = v.unwrap_or(f64::NAN);
                col += 1;
            }
        }
        let times: Vec<f64> = subj.visits.iter().map(|v| v.time_months).collect();
        let mut zero_interval = false;
        for &(from, to, _) in intervals {
            for &j in &longitudinal {
                let vals: Vec<Option<f64>> = subj.visits.iter().map(|v| v.values[j]).collect();
                match delta(&vals, &times, from, to) {
                    Ok(Some(d)) => x[[i, col]] = d,
                    Ok(None) => report.missing_deltas += 1,
                    Err(()) => {
                        zero_interval = true;
                        report.missing_deltas += 1;
                    }
                }
                col += 1;
            }
        }
        if zero_interval {
            report.zero_intervals += 1;
        }
    }
    if report.zero_intervals > 0 {
        log::warn!("{} subjects have zero-length visit intervals; their deltas are missing", report.zero_intervals);
    }

    DesignMatrix {
        x,
        feature_names,
        kinds,
        time: c.subjects().iter().map(|s| s.event_time_months).collect(),
        event: c.subjects().iter().map(|s| s.event).collect(),
        ids: c.subjects().iter().map(|s| s.id.clone()).collect(),
        report,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub kind: FeatureKind,
    pub mean: f64,
    pub sd: f64,
}

/// Learned standardization. Names are partitioned into base and delta
/// groups for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub base_features: Vec<String>,
    pub delta01_features: Vec<String>,
    pub delta12_features: Vec<String>,
    /// Kept columns, in output order. One-hot columns carry mean 0, sd 1.
    pub columns: Vec<ColumnScaling>,
    /// Columns constant on the training rows.
    pub dropped: Vec<String>,
    /// Full input column list the spec was fitted on.
    pub input_features: Vec<String>,
}

impl FeatureSpec {
    pub fn output_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Per-column mean and sample standard deviation (n - 1) on the training rows.
pub fn fit_standardizer(train: &SurvivalDataset) -> Result<FeatureSpec, FeatureError> {
    let n = train.n();
    if n == 0 {
        return Err(FeatureError::EmptyTrain);
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for (j, name) in train.feature_names.iter().enumerate() {
        let col = train.x.column(j);
        let mean = col.sum() / n as f64;
        let sd = if n > 1 {
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        if !(sd > 0.0) {
            log::warn!("feature `{name}` is constant on the training rows; dropped");
            dropped.push(name.clone());
            continue;
        }
        let kind = train.kinds[j];
        let (mean, sd) = match kind {
            FeatureKind::Numeric => (mean, sd),
            FeatureKind::OneHot => (0.0, 1.0),
        };
        columns.push(ColumnScaling {
            name: name.clone(),
            kind,
            mean,
            sd,
        });
    }
    let pick = |suffix: &str| -> Vec<String> {
        columns
            .iter()
            .filter(|c| c.name.ends_with(suffix))
            .map(|c| c.name.clone())
            .collect()
    };
    let delta01_features = pick(DELTA01_SUFFIX);
    let delta12_features = pick(DELTA12_SUFFIX);
    let base_features = columns
        .iter()
        .filter(|c| !c.name.ends_with(DELTA01_SUFFIX) && !c.name.ends_with(DELTA12_SUFFIX))
        .map(|c| c.name.clone())
        .collect();
    Ok(FeatureSpec {
        base_features,
        delta01_features,
        delta12_features,
        columns,
        dropped,
        input_features: train.feature_names.clone(),
    })
}

/// Apply stored parameters; output columns follow `spec.columns`.
pub fn apply_standardizer(spec: &FeatureSpec, ds: &SurvivalDataset) -> Result<SurvivalDataset, FeatureError> {
    if ds.feature_names != spec.input_features {
        let found = ds.feature_names.join(",");
        return Err(FeatureError::FeatureMismatch {
            expected: spec.input_features.join(","),
            found,
        });
    }
    let idx: Vec<usize> = spec
        .columns
        .iter()
        .map(|c| ds.column_index(&c.name).expect("names checked above"))
        .collect();
    let mut out = ds.select_columns(&idx);
    for (k, c) in spec.columns.iter().enumerate() {
        if c.kind == FeatureKind::Numeric {
            out.x.column_mut(k).mapv_inplace(|v| (v - c.mean) / c.sd);
        }
    }
    Ok(out)
}
