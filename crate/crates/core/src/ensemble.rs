//! Risk-score aggregation: ensemble averaging (EA) and Bayesian model
//! averaging (BMA) over z-normalized per-model scores.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{cox_nll, CoxError};
use crate::dataset::SurvivalDataset;
use crate::deepsurv::DeepSurvModel;
use crate::gbcox::GbcoxModel;
use crate::rsf::RsfModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("no score vectors to aggregate")]
    Empty,
    #[error("score vector `{model}` has length {found}, expected {expected}")]
    LengthMismatch { model: String, expected: usize, found: usize },
    #[error("score vector `{0}` is not finite")]
    NonFinite(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("no events in the validation set")]
    NoEvents,
}

impl From<CoxError> for EnsembleError {
    fn from(e: CoxError) -> Self {
        match e {
            CoxError::NoEvents => EnsembleError::NoEvents,
            CoxError::LengthMismatch(a, b, _) => EnsembleError::LengthMismatch {
                model: "validation".into(),
                expected: b,
                found: a,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScores {
    pub model_id: String,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl RiskScores {
    pub fn new(model_id: impl Into<String>, scores: Vec<f64>) -> Result<Self, EnsembleError> {
        let model_id = model_id.into();
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFinite(model_id));
        }
        Ok(Self {
            model_id,
            scores,
            normalized: false,
        })
    }

    /// z-score with the sample sd; a constant vector maps to zeros.
    pub fn normalize(&self) -> RiskScores {
        if self.normalized {
            return self.clone();
        }
        RiskScores {
            model_id: self.model_id.clone(),
            scores: z_normalize(&self.scores),
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn z_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    if v.len() < 2 {
        return vec![0.0; v.len()];
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        v.iter().map(|x| (x - mean) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    ValidationLikelihood,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaWeights {
    pub weights: Vec<f64>,
    pub source: WeightSource,
}

impl BmaWeights {
    pub fn uniform(m: usize) -> Self {
        Self {
            weights: vec![1.0 / m as f64; m],
            source: WeightSource::Uniform,
        }
    }

    /// `w_m ∝ prior_m exp(-nll_m)`, computed with a max shift.
    pub fn from_nll(nll: &[f64], prior: Option<&[f64]>) -> Result<Self, EnsembleError> {
        if nll.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let uniform = vec![1.0; nll.len()];
        let prior = prior.unwrap_or(&uniform);
        if prior.len() != nll.len() {
            return Err(EnsembleError::InvalidWeights(format!(
                "{} prior weights for {} models",
                prior.len(),
                nll.len()
            )));
        }
        if prior.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || prior.iter().all(|p| *p == 0.0) {
            return Err(EnsembleError::InvalidWeights("prior must be nonnegative and not all zero".into()));
        }
        let logs: Vec<f64> = nll
            .iter()
            .zip(prior)
            .map(|(l, p)| if *p > 0.0 { p.ln() - l } else { f64::NEG_INFINITY })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(EnsembleError::InvalidWeights("likelihoods are not finite".into()));
        }
        let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            weights: raw.iter().map(|r| r / total).collect(),
            source: WeightSource::ValidationLikelihood,
        })
    }

    /// Elementwise mean of several weight vectors (e.g. one per CV fold).
    pub fn average(all: &[BmaWeights]) -> Result<Self, EnsembleError> {
        let first = all.first().ok_or(EnsembleError::Empty)?;
        let m = first.weights.len();
        if all.iter().any(|w| w.weights.len() != m) {
            return Err(EnsembleError::InvalidWeights("weight vectors differ in length".into()));
        }
        let weights = (0..m)
            .map(|k| all.iter().map(|w| w.weights[k]).sum::<f64>() / all.len() as f64)
            .collect();
        Ok(Self {
            weights,
            source: first.source,
        })
    }

    pub fn check(&self, m: usize) -> Result<(), EnsembleError> {
        if self.weights.len() != m {
            return Err(EnsembleError::InvalidWeights(format!(
                "{} weights for {m} models",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(EnsembleError::InvalidWeights("negative weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(())
    }
}

fn normalized_inputs(scores: &[RiskScores]) -> Result<Vec<RiskScores>, EnsembleError> {
    let first = scores.first().ok_or(EnsembleError::Empty)?;
    let n = first.len();
    scores
        .iter()
        .map(|s| {
            if s.len() != n {
                return Err(EnsembleError::LengthMismatch {
                    model: s.model_id.clone(),
                    expected: n,
                    found: s.len(),
                });
            }
            Ok(s.normalize())
        })
        .collect()
}

/// `mean_m z_m,i`; inputs not yet normalized are z-scored first.
pub fn aggregate_ea(scores: &[RiskScores]) -> Result<RiskScores, EnsembleError> {
    let z = normalized_inputs(scores)?;
    let m = z.len() as f64;
    let n = z[0].len();
    let out = (0..n).map(|i| z.iter().map(|s| s.scores[i]).sum::<f64>() / m).collect();
    Ok(RiskScores {
        model_id: "ea".into(),
        scores: out,
        normalized: false,
    })
}

/// `sum_m w_m z_m,i`.
pub fn aggregate_bma(scores: &[RiskScores], w: &BmaWeights) -> Result<RiskScores, EnsembleError> {
    let z = normalized_inputs(scores)?;
    w.check(z.len())?;
    let n = z[0].len();
    let out = (0..n)
        .map(|i| z.iter().zip(&w.weights).map(|(s, wm)| wm * s.scores[i]).sum())
        .collect();
    Ok(RiskScores {
        model_id: "bma".into(),
        scores: out,
        normalized: false,
    })
}

/// BMA weights from raw validation scores: each model's scores are
/// z-normalized on the validation set, then scored by `cox_nll`.
pub fn bma_weights_from_scores(
    val_scores: &[Vec<f64>],
    time: &[f64],
    event: &[bool],
    prior: Option<&[f64]>,
) -> Result<BmaWeights, EnsembleError> {
    let nll = val_scores
        .iter()
        .map(|s| cox_nll(&z_normalize(s), time, event))
        .collect::<Result<Vec<_>, _>>()?;
    BmaWeights::from_nll(&nll, prior)
}

/// Anything that maps a feature matrix to per-row risk scores.
pub trait RiskModel {
    fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64>;
}

impl RiskModel for RsfModel {
    fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        RsfModel::risk_scores(self, x)
    }
}

impl RiskModel for DeepSurvModel {
    fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        DeepSurvModel::risk_scores(self, x)
    }
}

impl RiskModel for GbcoxModel {
    fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        GbcoxModel::risk_scores(self, x)
    }
}

pub fn compute_bma_weights(
    models: &[&dyn RiskModel],
    val: &SurvivalDataset,
    prior: Option<&[f64]>,
) -> Result<BmaWeights, EnsembleError> {
    let scores: Vec<Vec<f64>> = models.iter().map(|m| m.risk_scores(&val.x)).collect();
    bma_weights_from_scores(&scores, &val.time, &val.event, prior)
}

/// The three base learners behind one tag, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Rsf(RsfModel),
    #[serde(rename = "deepsurv")]
    DeepSurv(DeepSurvModel),
    #[serde(rename = "xgboost")]
    Gbcox(GbcoxModel),
}

impl FittedModel {
    pub fn id(&self) -> &'static str {
        match self {
            FittedModel::Rsf(_) => "rsf",
            FittedModel::DeepSurv(_) => "deepsurv",
            FittedModel::Gbcox(_) => "xgboost",
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            FittedModel::Rsf(m) => m.n_features,
            FittedModel::DeepSurv(m) => m.n_features,
            FittedModel::Gbcox(m) => m.n_features,
        }
    }
}

impl RiskModel for FittedModel {
    fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        match self {
            FittedModel::Rsf(m) => m.risk_scores(x),
            FittedModel::DeepSurv(m) => m.risk_scores(x),
            FittedModel::Gbcox(m) => m.risk_scores(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rs(id: &str, v: &[f64]) -> RiskScores {
        RiskScores::new(id, v.to_vec()).unwrap()
    }

    #[test]
    fn ea_identity_and_cancellation() {
        let a = rs("a", &[1.0, 3.0, 2.0]);
        assert_eq!(aggregate_ea(&[a.clone()]).unwrap().scores, a.normalize().scores);
        let p = RiskScores {
            model_id: "p".into(),
            scores: vec![1.0, -1.0],
            normalized: true,
        };
        let q = RiskScores {
            model_id: "q".into(),
            scores: vec![-1.0, 1.0],
            normalized: true,
        };
        assert_eq!(aggregate_ea(&[p, q]).unwrap().scores, vec![0.0, 0.0]);
    }

    #[test]
    fn bma_degenerate_weights() {
        let a = rs("a", &[1.0, 3.0, 2.0]);
        let b = rs("b", &[0.0, 5.0, -2.0]);
        let w = BmaWeights {
            weights: vec![1.0, 0.0],
            source: WeightSource::Uniform,
        };
        assert_eq!(aggregate_bma(&[a.clone(), b], &w).unwrap().scores, a.normalize().scores);
    }

    #[test]
    fn softmax_arithmetic() {
        let w = BmaWeights::from_nll(&[100.0, 50.0, 100.0], None).unwrap();
        assert!(w.weights[1] > 0.999);
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = BmaWeights::from_nll(&[7.0, 7.0, 7.0], None).unwrap();
        assert!(u.weights.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn length_mismatch() {
        let err = aggregate_ea(&[rs("a", &[1.0, 2.0]), rs("b", &[1.0])]).unwrap_err();
        assert!(matches!(err, EnsembleError::LengthMismatch { found: 1, .. }));
    }

    #[test]
    fn constant_scores_normalize_to_zero() {
        assert_eq!(z_normalize(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
        assert!(RiskScores::new("x", vec![f64::NAN]).is_err());
    }

    #[test]
    fn validation_nll_prefers_better_model() {
        let time = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let event = [true; 6];
        let good = vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let bad: Vec<f64> = good.iter().map(|v| -v).collect();
        let w = bma_weights_from_scores(&[good, bad], &time, &event, None).unwrap();
        assert!(w.weights[0] > w.weights[1]);
        assert!(bma_weights_from_scores(&[vec![1.0; 6]], &time, &[false; 6], None).is_err());
    }
}
