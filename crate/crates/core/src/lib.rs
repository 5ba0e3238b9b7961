//! Ensemble survival analysis on longitudinal cohorts: penalized Cox feature
//! selection, random survival forests, DeepSurv and Cox gradient boosting,
//! EA/BMA aggregation, MICE with Rubin pooling, and C-index / IPCW AUC
//! evaluation.

pub mod config;
pub mod cox;
pub mod coxnet;
pub mod dataset;
pub mod deepsurv;
pub mod ensemble;
pub mod features;
pub mod gbcox;
pub mod impute;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod rsf;
pub mod seed;
pub mod synth;

pub use config::{Aggregation, Penalty, RunConfig};
pub use cox::{cox_grad_hess, cox_nll, CoxError};
pub use coxnet::{fit_coxnet, CoxnetFit};
pub use dataset::{CohortSchema, CohortTable, DatasetError, FeatureKind, SubjectRecord, SurvivalDataset, Visit};
pub use deepsurv::{fit_deepsurv, DeepSurvModel, MlpConfig};
pub use ensemble::{aggregate_bma, aggregate_ea, compute_bma_weights, BmaWeights, FittedModel, RiskModel, RiskScores};
pub use features::{build_design, Scenario};
pub use gbcox::{fit_gbcox, GbcoxModel, GbcoxParams};
pub use impute::{mice, pool, ImputationSet, PooledEstimate};
pub use metrics::{auc_curve, c_index, AucCurve, ImportanceReport};
pub use pipeline::{run, run_audited, RunReport};
pub use rsf::{fit_rsf, RsfModel, RsfParams};
pub use seed::derive_seed;
pub use synth::{generate, GroundTruth, SynthConfig};
