//! End-to-end experiment: split, impute, build scenario features, select,
//! fit the three learners, aggregate, evaluate per imputation and pool.

use std::collections::BTreeSet;
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Aggregation, ConfigError, Penalty, RunConfig};
use crate::coxnet::{default_lambda_grid, fit_coxnet, path_top_k, stratified_folds, CoxnetFit};
use crate::dataset::{load_cohort, CohortTable, DatasetError, SurvivalDataset};
use crate::deepsurv::{fit_deepsurv, MlpConfig};
use crate::ensemble::{aggregate_bma, aggregate_ea, bma_weights_from_scores, BmaWeights, RiskModel, RiskScores};
use crate::features::{apply_standardizer, build_design, fit_standardizer, Scenario};
use crate::gbcox::{fit_gbcox, GbcoxParams};
use crate::impute::{mice, pool_with, PooledEstimate};
use crate::metrics::{auc_curve, c_index, permutation_importance, ImportanceReport};
use crate::rsf::{fit_rsf, RsfParams};
use crate::seed::{derive_seed, rng_for};
use crate::synth::{generate, SynthError};

pub const REPORT_VERSION: u32 = 1;
/// Base learner ids in report order.
pub const BASE_MODELS: [&str; 3] = ["rsf", "deepsurv", "xgboost"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("no data source: set [data] or [synth]")]
    NoDataSource,
    #[error("unknown subgroup column `{0}`")]
    UnknownSubgroupColumn(String),
    #[error("split leaves too few subjects: {0}")]
    TooSmall(String),
}

impl PipelineError {
    /// Validation problems (bad input) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, PipelineError::TooSmall(_))
    }
}

/// Load the cohort a config points at.
pub fn load_run_cohort(cfg: &RunConfig) -> Result<CohortTable, PipelineError> {
    match (&cfg.data, &cfg.synth) {
        (Some(src), _) => Ok(load_cohort(&src.path, &src.schema)?),
        (None, Some(s)) => Ok(generate(s)?.0),
        (None, None) => Err(PipelineError::NoDataSource),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStage {
    Standardizer,
    LambdaCv,
    FeatureSelection,
    BmaWeights,
    LearnerFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: AuditStage,
    pub scenario: Scenario,
    pub penalty: Option<Penalty>,
    pub imputation: usize,
    pub fold: Option<usize>,
    /// Subject ids whose outcomes or covariates entered the fit.
    pub ids: Vec<String>,
}

/// Every fitting stage reports the subjects it touched.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    fn record(&self, entry: AuditEntry) {
        self.entries.lock().expect("audit lock").push(entry);
    }

    /// Entries in a deterministic order.
    pub fn into_entries(self) -> Vec<AuditEntry> {
        let mut v = self.entries.into_inner().expect("audit lock");
        v.sort_by(|a, b| {
            (a.scenario, a.penalty, a.imputation, a.fold, a.stage).cmp(&(b.scenario, b.penalty, b.imputation, b.fold, b.stage))
        });
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Indices into the cohort's subject order, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Event-stratified holdout: within events and non-events separately,
/// `round(test_fraction * group size)` subjects go to the test set.
pub fn stratified_split(event: &[bool], test_fraction: f64, seed: u64) -> Split {
    let mut rng = rng_for(seed, "split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for flag in [true, false] {
        let mut idx: Vec<usize> = (0..event.len()).filter(|&i| event[i] == flag).collect();
        idx.shuffle(&mut rng);
        let k = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: Scenario,
    pub penalty: Penalty,
    /// `rsf`, `deepsurv`, `xgboost` or `ensemble`.
    pub model: String,
    /// `none` for base learners, else `ea` / `bma`.
    pub agg: String,
    pub cindex: PooledEstimate,
    pub iauc: PooledEstimate,
    /// Fold-mean metric per imputation (the pooled point estimates).
    pub cindex_by_imputation: Vec<f64>,
    pub iauc_by_imputation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub scenario: Scenario,
    pub penalty: Penalty,
    pub alpha: f64,
    pub lambda_by_imputation: Vec<f64>,
    pub selected_by_imputation: Vec<Vec<String>>,
    /// Union over imputations; the learners' inputs.
    pub features: Vec<String>,
    /// Every imputation selected nothing; `features` is the path top-k.
    pub fallback_top_k: bool,
    /// Fold-averaged BMA weights per imputation, in [`BASE_MODELS`] order.
    pub bma_weights_by_imputation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub scenario: Scenario,
    pub penalty: Option<Penalty>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub n_test: usize,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub column: String,
    pub edges: Vec<f64>,
    /// Test subjects outside every bin or missing the column.
    pub dropped: usize,
    pub bins: Vec<SubgroupBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSection {
    pub scenario: Scenario,
    pub penalty: Penalty,
    pub aggregation: Aggregation,
    pub report: ImportanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub m_imputations: usize,
    pub cv_folds: usize,
    pub scenarios: Vec<Scenario>,
    pub penalties: Vec<Penalty>,
    pub aggregations: Vec<Aggregation>,
    pub cells: Vec<CellResult>,
    pub selection: Vec<SelectionSummary>,
    pub subgroup: Option<SubgroupReport>,
    pub importance: Option<ImportanceSection>,
    pub errors: Vec<CellError>,
}

impl RunReport {
    pub fn cell(&self, scenario: Scenario, penalty: Penalty, model: &str, agg: &str) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.penalty == penalty && c.model == model && c.agg == agg)
    }
}

/// Score targets per fold: the three learners, then the configured
/// aggregations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Base(usize),
    Agg(Aggregation),
}

impl Target {
    fn model(self) -> &'static str {
        match self {
            Target::Base(k) => BASE_MODELS[k],
            Target::Agg(_) => "ensemble",
        }
    }

    fn agg(self) -> &'static str {
        match self {
            Target::Base(_) => "none",
            Target::Agg(a) => a.label(),
        }
    }
}

struct ImputedData {
    train: SurvivalDataset,
    test: SurvivalDataset,
}

struct FoldFit {
    weights: BmaWeights,
    /// Raw test scores per base learner.
    test_scores: Vec<Vec<f64>>,
    models: Option<Vec<Box<dyn RiskModel + Send + Sync>>>,
}

/// Per-imputation, per-fold scores on the evaluated rows for every target.
type ScoreGrid = Vec<Vec<Vec<Vec<f64>>>>;

fn ids_of(ds: &SurvivalDataset, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&i| ds.ids[i].clone()).collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var / n)
}

fn label_seed(seed: u64, parts: std::fmt::Arguments<'_>) -> u64 {
    derive_seed(seed, &parts.to_string())
}

struct CellContext<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
    penalty: Penalty,
    audit: &'a AuditLog,
}

impl CellContext<'_> {
    fn fit_fold(
        &self,
        m: usize,
        k: usize,
        train: &SurvivalDataset,
        test: &SurvivalDataset,
        folds: &[usize],
        keep_models: bool,
    ) -> Result<FoldFit, String> {
        let (s, p, seed) = (self.scenario, self.penalty, self.cfg.seed);
        let fit_rows: Vec<usize> = (0..train.n()).filter(|&i| folds[i] != k).collect();
        let val_rows: Vec<usize> = (0..train.n()).filter(|&i| folds[i] == k).collect();
        let entry = |stage, rows: &[usize]| AuditEntry {
            stage,
            scenario: s,
            penalty: Some(p),
            imputation: m,
            fold: Some(k),
            ids: ids_of(train, rows),
        };
        self.audit.record(entry(AuditStage::LearnerFit, &fit_rows));
        self.audit.record(entry(AuditStage::BmaWeights, &val_rows));
        let fit_ds = train.subset_rows(&fit_rows);
        let val_ds = train.subset_rows(&val_rows);

        let rsf_params = RsfParams {
            seed: label_seed(seed, format_args!("rsf/{s}/{}/{m}/{k}", p.label())),
            ..self.cfg.rsf.clone()
        };
        let mlp = MlpConfig {
            weight_init_seed: label_seed(seed, format_args!("deepsurv/{s}/{}/{m}/{k}", p.label())),
            ..self.cfg.deepsurv.clone()
        };
        let gb = GbcoxParams {
            seed: label_seed(seed, format_args!("gbcox/{s}/{}/{m}/{k}", p.label())),
            ..self.cfg.gbcox.clone()
        };
        let rsf = fit_rsf(&fit_ds, &rsf_params).map_err(|e| format!("rsf: {e}"))?;
        let ds = fit_deepsurv(&fit_ds, &mlp).map_err(|e| format!("deepsurv: {e}"))?;
        let xgb = fit_gbcox(&fit_ds, &gb).map_err(|e| format!("xgboost: {e}"))?;
        let models: Vec<Box<dyn RiskModel + Send + Sync>> = vec![Box::new(rsf), Box::new(ds), Box::new(xgb)];
        let val_scores: Vec<Vec<f64>> = models.iter().map(|md| md.risk_scores(&val_ds.x)).collect();
        let weights = bma_weights_from_scores(&val_scores, &val_ds.time, &val_ds.event, None)
            .map_err(|e| format!("bma weights: {e}"))?;
        let test_scores = models.iter().map(|md| md.risk_scores(&test.x)).collect();
        Ok(FoldFit {
            weights,
            test_scores,
            models: keep_models.then_some(models),
        })
    }
}

fn target_scores(targets: &[Target], raw: &[Vec<f64>], weights: &BmaWeights) -> Result<Vec<Vec<f64>>, String> {
    let rs: Vec<RiskScores> = raw
        .iter()
        .enumerate()
        .map(|(k, v)| RiskScores::new(BASE_MODELS[k], v.clone()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    targets
        .iter()
        .map(|t| match t {
            Target::Base(k) => Ok(raw[*k].clone()),
            Target::Agg(Aggregation::Ea) => aggregate_ea(&rs).map(|r| r.scores).map_err(|e| e.to_string()),
            Target::Agg(Aggregation::Bma) => aggregate_bma(&rs, weights).map(|r| r.scores).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Metrics of every target on `rows` of the evaluated set, pooled across
/// imputations. `scores[m][k][target]` are aligned with the evaluated set.
fn pool_cells(
    cfg: &RunConfig,
    scenario: Scenario,
    penalty: Penalty,
    targets: &[Target],
    scores: &ScoreGrid,
    time: &[f64],
    event: &[bool],
    rows: Option<&[usize]>,
    errors: &mut Vec<CellError>,
) -> Vec<CellResult> {
    let (time, event): (Vec<f64>, Vec<bool>) = match rows {
        Some(r) => (r.iter().map(|&i| time[i]).collect(), r.iter().map(|&i| event[i]).collect()),
        None => (time.to_vec(), event.to_vec()),
    };
    let mut out = Vec::new();
    'target: for (ti, t) in targets.iter().enumerate() {
        let mut c_est = Vec::new();
        let mut a_est = Vec::new();
        for per_fold in scores {
            let mut cs = Vec::new();
            let mut auc = Vec::new();
            for fold in per_fold {
                let s: Vec<f64> = match rows {
                    Some(r) => r.iter().map(|&i| fold[ti][i]).collect(),
                    None => fold[ti].clone(),
                };
                let metric = c_index(&s, &time, &event).and_then(|c| auc_curve(&s, &time, &event).map(|a| (c, a.iauc)));
                match metric {
                    Ok((c, a)) => {
                        cs.push(c);
                        auc.push(a);
                    }
                    Err(e) => {
                        errors.push(CellError {
                            scenario,
                            penalty: Some(penalty),
                            stage: format!("evaluate/{}/{}", t.model(), t.agg()),
                            message: e.to_string(),
                        });
                        continue 'target;
                    }
                }
            }
            c_est.push(mean_and_se(&cs));
            a_est.push(mean_and_se(&auc));
        }
        let pooled = pool_with(&c_est, cfg.ci_level, cfg.df_rule)
            .and_then(|c| pool_with(&a_est, cfg.ci_level, cfg.df_rule).map(|a| (c, a)));
        match pooled {
            Ok((cindex, iauc)) => out.push(CellResult {
                scenario,
                penalty,
                model: t.model().into(),
                agg: t.agg().into(),
                cindex,
                iauc,
                cindex_by_imputation: c_est.iter().map(|e| e.0).collect(),
                iauc_by_imputation: a_est.iter().map(|e| e.0).collect(),
            }),
            Err(e) => errors.push(CellError {
                scenario,
                penalty: Some(penalty),
                stage: format!("pool/{}/{}", t.model(), t.agg()),
                message: e.to_string(),
            }),
        }
    }
    out
}

struct Bins {
    report: SubgroupReport,
    /// Test-set row indices per bin.
    rows: Vec<Vec<usize>>,
}

fn subgroup_bins(cfg: &RunConfig, cohort: &CohortTable, split: &Split) -> Result<Option<Bins>, PipelineError> {
    let Some(sg) = &cfg.subgroup else {
        return Ok(None);
    };
    let j = cohort
        .covariate_index(&sg.column)
        .ok_or_else(|| PipelineError::UnknownSubgroupColumn(sg.column.clone()))?;
    let nb = sg.edges.len() - 1;
    let mut rows = vec![Vec::new(); nb];
    let mut dropped = 0;
    for (r, &i) in split.test.iter().enumerate() {
        let bin = cohort.subjects()[i].first_observed(j).and_then(|v| {
            (0..nb).find(|&b| {
                let (lo, hi) = (sg.edges[b], sg.edges[b + 1]);
                v >= lo && (v < hi || (b == nb - 1 && v == hi))
            })
        });
        match bin {
            Some(b) => rows[b].push(r),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("subgroup `{}`: {dropped} test subjects outside every bin", sg.column);
    }
    let bins = (0..nb)
        .map(|b| SubgroupBin {
            label: format!("[{}, {}{}", sg.edges[b], sg.edges[b + 1], if b == nb - 1 { "]" } else { ")" }),
            lo: sg.edges[b],
            hi: sg.edges[b + 1],
            n_test: rows[b].len(),
            cells: Vec::new(),
        })
        .collect();
    Ok(Some(Bins {
        report: SubgroupReport {
            column: sg.column.clone(),
            edges: sg.edges.clone(),
            dropped,
            bins,
        },
        rows,
    }))
}

/// Run with instrumentation; the audit log lists every subject each fitting
/// stage consumed.
pub fn run_audited(cfg: &RunConfig, cohort: &CohortTable) -> Result<(RunReport, AuditLog), PipelineError> {
    cfg.validate()?;
    let audit = AuditLog::default();
    let events: Vec<bool> = cohort.subjects().iter().map(|s| s.event).collect();
    let split = stratified_split(&events, cfg.test_fraction, derive_seed(cfg.seed, "split"));
    if split.train.len() < 2 * cfg.cv_folds || split.test.len() < 2 {
        return Err(PipelineError::TooSmall(format!(
            "{} train / {} test subjects",
            split.train.len(),
            split.test.len()
        )));
    }
    let mut bins = subgroup_bins(cfg, cohort, &split)?;
    let targets: Vec<Target> = (0..BASE_MODELS.len())
        .map(Target::Base)
        .chain(cfg.aggregations.iter().map(|a| Target::Agg(*a)))
        .collect();

    let mut cells = Vec::new();
    let mut selection = Vec::new();
    let mut errors = Vec::new();
    let mut importance = None;
    for &scenario in &cfg.scenarios {
        let design = build_design(cohort, scenario);
        let imps = match mice(
            &design.x,
            cfg.m_imputations,
            cfg.mice_iterations,
            label_seed(cfg.seed, format_args!("mice/{scenario}")),
        ) {
            Ok(v) => v,
            Err(e) => {
                errors.push(CellError {
                    scenario,
                    penalty: None,
                    stage: "impute".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        // standardize each completed dataset with training-row statistics
        let data: Result<Vec<ImputedData>, String> = imps
            .datasets
            .par_iter()
            .enumerate()
            .map(|(m, x)| {
                let ds = design.complete(x.clone()).map_err(|e| e.to_string())?;
                let train = ds.subset_rows(&split.train);
                let test = ds.subset_rows(&split.test);
                audit.record(AuditEntry {
                    stage: AuditStage::Standardizer,
                    scenario,
                    penalty: None,
                    imputation: m,
                    fold: None,
                    ids: train.ids.clone(),
                });
                let spec = fit_standardizer(&train).map_err(|e| e.to_string())?;
                Ok(ImputedData {
                    train: apply_standardizer(&spec, &train).map_err(|e| e.to_string())?,
                    test: apply_standardizer(&spec, &test).map_err(|e| e.to_string())?,
                })
            })
            .collect();
        let data = match data {
            Ok(d) => d,
            Err(message) => {
                errors.push(CellError {
                    scenario,
                    penalty: None,
                    stage: "standardize".into(),
                    message,
                });
                continue;
            }
        };
        let test_time = data[0].test.time.clone();
        let test_event = data[0].test.event.clone();
        let bma_folds = stratified_folds(&data[0].train.event, cfg.cv_folds, derive_seed(cfg.seed, "bma-folds"));

        for &penalty in &cfg.penalties {
            let ctx = CellContext {
                cfg,
                scenario,
                penalty,
                audit: &audit,
            };
            let alpha = cfg.alpha_for(penalty);
            let fits: Result<Vec<CoxnetFit>, String> = data
                .par_iter()
                .enumerate()
                .map(|(m, d)| {
                    for stage in [AuditStage::LambdaCv, AuditStage::FeatureSelection] {
                        audit.record(AuditEntry {
                            stage,
                            scenario,
                            penalty: Some(penalty),
                            imputation: m,
                            fold: None,
                            ids: d.train.ids.clone(),
                        });
                    }
                    let grid = default_lambda_grid(&d.train, alpha, cfg.selection.n_lambda, cfg.selection.lambda_min_ratio);
                    fit_coxnet(
                        &d.train,
                        alpha,
                        &grid,
                        cfg.cv_folds,
                        label_seed(cfg.seed, format_args!("coxnet/{scenario}/{}/{m}", penalty.label())),
                        &cfg.selection.solver,
                    )
                    .map_err(|e| e.to_string())
                })
                .collect();
            let fits = match fits {
                Ok(f) => f,
                Err(message) => {
                    errors.push(CellError {
                        scenario,
                        penalty: Some(penalty),
                        stage: "select".into(),
                        message,
                    });
                    continue;
                }
            };
            let chosen: BTreeSet<&str> = fits
                .iter()
                .flat_map(|f| f.selected.iter().map(move |&j| f.feature_names[j].as_str()))
                .collect();
            let fallback = chosen.is_empty();
            let features: Vec<String> = if fallback {
                path_top_k(&fits[0], cfg.selection.top_k)
                    .into_iter()
                    .map(|j| fits[0].feature_names[j].clone())
                    .collect()
            } else {
                // design order
                design
                    .feature_names
                    .iter()
                    .filter(|n| chosen.contains(n.as_str()))
                    .cloned()
                    .collect()
            };
            if features.is_empty() {
                errors.push(CellError {
                    scenario,
                    penalty: Some(penalty),
                    stage: "select".into(),
                    message: "no features selected and the path is empty".into(),
                });
                continue;
            }
            let selected: Vec<(SurvivalDataset, SurvivalDataset)> = data
                .iter()
                .map(|d| {
                    let cols: Vec<usize> = features.iter().filter_map(|f| d.train.column_index(f)).collect();
                    (d.train.select_columns(&cols), d.test.select_columns(&cols))
                })
                .collect();

            let want_importance = cfg.importance.enabled
                && cfg.importance.scenario == scenario
                && cfg.importance.penalty == penalty;
            let jobs: Vec<(usize, usize)> = (0..cfg.m_imputations)
                .flat_map(|m| (0..cfg.cv_folds).map(move |k| (m, k)))
                .collect();
            let folds: Result<Vec<FoldFit>, String> = jobs
                .par_iter()
                .map(|&(m, k)| {
                    let (train, test) = &selected[m];
                    ctx.fit_fold(m, k, train, test, &bma_folds, want_importance && m == 0 && k == 0)
                })
                .collect();
            let mut folds = match folds {
                Ok(f) => f,
                Err(message) => {
                    errors.push(CellError {
                        scenario,
                        penalty: Some(penalty),
                        stage: "fit".into(),
                        message,
                    });
                    continue;
                }
            };
            let mut scores: ScoreGrid = Vec::with_capacity(cfg.m_imputations);
            let mut weights_by_m = Vec::with_capacity(cfg.m_imputations);
            let mut failed = None;
            for chunk in folds.chunks(cfg.cv_folds) {
                let ws: Vec<BmaWeights> = chunk.iter().map(|f| f.weights.clone()).collect();
                let avg = match BmaWeights::average(&ws) {
                    Ok(w) => w,
                    Err(e) => {
                        failed = Some(e.to_string());
                        break;
                    }
                };
                let per_fold: Result<Vec<Vec<Vec<f64>>>, String> =
                    chunk.iter().map(|f| target_scores(&targets, &f.test_scores, &avg)).collect();
                match per_fold {
                    Ok(v) => scores.push(v),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
                weights_by_m.push(avg);
            }
            if let Some(message) = failed {
                errors.push(CellError {
                    scenario,
                    penalty: Some(penalty),
                    stage: "aggregate".into(),
                    message,
                });
                continue;
            }

            cells.extend(pool_cells(cfg, scenario, penalty, &targets, &scores, &test_time, &test_event, None, &mut errors));
            if let Some(b) = &mut bins {
                for (bin, rows) in b.report.bins.iter_mut().zip(&b.rows) {
                    if rows.is_empty() {
                        errors.push(CellError {
                            scenario,
                            penalty: Some(penalty),
                            stage: format!("subgroup {}", bin.label),
                            message: "empty bin".into(),
                        });
                        continue;
                    }
                    let mut bin_errors = Vec::new();
                    bin.cells.extend(pool_cells(
                        cfg,
                        scenario,
                        penalty,
                        &targets,
                        &scores,
                        &test_time,
                        &test_event,
                        Some(rows),
                        &mut bin_errors,
                    ));
                    errors.extend(bin_errors.into_iter().map(|mut e| {
                        e.stage = format!("subgroup {}/{}", bin.label, e.stage);
                        e
                    }));
                }
            }

            if want_importance {
                let models = folds[0].models.take().expect("kept for importance");
                let weights = weights_by_m[0].clone();
                let agg = cfg.aggregations[0];
                let (_, test) = &selected[0];
                let scorer = |x: &Array2<f64>| -> Vec<f64> {
                    let raw: Vec<Vec<f64>> = models.iter().map(|md| md.risk_scores(x)).collect();
                    target_scores(&[Target::Agg(agg)], &raw, &weights)
                        .map(|mut v| v.remove(0))
                        .unwrap_or_else(|_| vec![0.0; x.nrows()])
                };
                match permutation_importance(
                    scorer,
                    &test.x,
                    &test.feature_names,
                    &test.time,
                    &test.event,
                    cfg.importance.repeats,
                    derive_seed(cfg.seed, "importance"),
                ) {
                    Ok(report) => {
                        importance = Some(ImportanceSection {
                            scenario,
                            penalty,
                            aggregation: agg,
                            report,
                        })
                    }
                    Err(e) => errors.push(CellError {
                        scenario,
                        penalty: Some(penalty),
                        stage: "importance".into(),
                        message: e.to_string(),
                    }),
                }
            }

            selection.push(SelectionSummary {
                scenario,
                penalty,
                alpha,
                lambda_by_imputation: fits.iter().map(|f| f.lambda).collect(),
                selected_by_imputation: fits.iter().map(|f| f.selected_names()).collect(),
                features,
                fallback_top_k: fallback,
                bma_weights_by_imputation: weights_by_m.into_iter().map(|w| w.weights).collect(),
            });
        }
    }
    for e in &errors {
        log::warn!(
            "cell {}/{} failed at {}: {}",
            e.scenario,
            e.penalty.map(|p| p.label()).unwrap_or("*"),
            e.stage,
            e.message
        );
    }
    let report = RunReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        n_subjects: cohort.len(),
        n_train: split.train.len(),
        n_test: split.test.len(),
        m_imputations: cfg.m_imputations,
        cv_folds: cfg.cv_folds,
        scenarios: cfg.scenarios.clone(),
        penalties: cfg.penalties.clone(),
        aggregations: cfg.aggregations.clone(),
        cells,
        selection,
        subgroup: bins.map(|b| b.report),
        importance,
        errors,
    };
    Ok((report, audit))
}

pub fn run(cfg: &RunConfig, cohort: &CohortTable) -> Result<RunReport, PipelineError> {
    run_audited(cfg, cohort).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let event: Vec<bool> = (0..100).map(|i| i % 5 == 0).collect();
        let s = stratified_split(&event, 0.2, 3);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.test.iter().filter(|&&i| event[i]).count(), 4);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, stratified_split(&event, 0.2, 3));
    }

    #[test]
    fn fold_mean_standard_error() {
        let (m, v) = mean_and_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((v - 2.5 / 5.0).abs() < 1e-15);
    }
}
