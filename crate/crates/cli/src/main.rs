//! `survens`: synthetic cohorts, imputation, feature selection, learner fits,
//! evaluation and the full ensemble experiment, all driven by one config file.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use survens_core::config::{ConfigError, CsvSource, Penalty};
use survens_core::coxnet::{default_lambda_grid, path_top_k, CoxnetFit};
use survens_core::dataset::{load_dataset, save_cohort, save_dataset, DatasetError};
use survens_core::ensemble::{aggregate_bma, aggregate_ea, bma_weights_from_scores, BmaWeights, RiskScores};
use survens_core::features::{apply_standardizer, fit_standardizer, FeatureError, FeatureSpec};
use survens_core::metrics::{auc_curve, c_index, permutation_importance};
use survens_core::pipeline::{load_run_cohort, PipelineError};
use survens_core::report::{read_report, write_json, write_report_dir, write_table_csv, Manifest, Metric, ReportError};
use survens_core::{
    build_design, derive_seed, fit_coxnet, fit_deepsurv, fit_gbcox, fit_rsf, generate, mice, Aggregation,
    FittedModel, GbcoxParams, MlpConfig, RiskModel, RsfParams, RunConfig, Scenario, SurvivalDataset,
};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Dataset(_) | CliError::Feature(_) | CliError::Invalid(_) => 1,
            CliError::Pipeline(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "survens", version, about = "Ensemble survival analysis on longitudinal cohorts")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rsf.n_trees=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides)?,
            None => RunConfig::from_toml_str("", &self.overrides)?,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a longitudinal cohort from the `[synth]` block.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Build a scenario design and write M completed datasets.
    Impute {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "3visits")]
        scenario: Scenario,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Penalized Cox selection on a completed dataset.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        /// Completed dataset CSV (`id, features..., time, event`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "lasso")]
        penalty: Penalty,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Fit one learner and save it as JSON.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with saved models and compute C-index / AUC(t).
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// One or more model files from `fit`.
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AggArg::None)]
        agg: AggArg,
        /// Dataset for BMA weights; required with `--agg bma`.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Permutation-importance repeats; 0 skips importance.
        #[arg(long, default_value_t = 0)]
        importance_repeats: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// The full experiment: split, impute, select, fit, aggregate, pool.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Restrict aggregations (comma-separated: ea,bma).
        #[arg(long, value_delimiter = ',')]
        agg: Option<Vec<Aggregation>>,
        /// Restrict scenarios (comma-separated: baseline,2visits,3visits).
        #[arg(long, value_delimiter = ',')]
        scenario: Option<Vec<Scenario>>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Re-render tables from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Cindex)]
        metric: MetricArg,
        /// Rewrite report.json / CSVs here as well.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModelKind {
    Rsf,
    Deepsurv,
    Xgboost,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum AggArg {
    None,
    Ea,
    Bma,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MetricArg {
    Cindex,
    Iauc,
}

/// A learner plus the standardization it was trained under.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    standardizer: FeatureSpec,
    #[serde(flatten)]
    model: FittedModel,
}

impl ModelFile {
    fn score(&self, ds: &SurvivalDataset) -> Result<Vec<f64>> {
        let z = apply_standardizer(&self.standardizer, ds)?;
        Ok(self.model.risk_scores(&z.x))
    }
}

#[derive(Serialize)]
struct DataFile<'a> {
    data: &'a CsvSource,
}

#[derive(Serialize)]
struct SelectionFile<'a> {
    penalty: Penalty,
    alpha: f64,
    lambda: f64,
    features: &'a [String],
    fallback_top_k: bool,
    fit: &'a CoxnetFit,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    models: Vec<&'static str>,
    agg: AggArg,
    n: usize,
    n_events: usize,
    cindex: f64,
    iauc: f64,
    auc_curve: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bma_weights: Option<&'a [f64]>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_manifest(path: &Path, command: &str, hash: String, seed: u64, outputs: Vec<String>) -> Result<()> {
    write_json(path, &Manifest::new(command, hash, seed, outputs))?;
    Ok(())
}

fn cmd_generate(config: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let cfg = config.load()?;
    let synth = cfg.synth.clone().unwrap_or_default();
    let (cohort, truth) = generate(&synth).map_err(PipelineError::from)?;
    create_dir(out_dir)?;
    let schema = synth.schema();
    save_cohort(out_dir.join("cohort.csv"), &cohort, &schema)?;
    write_json(&out_dir.join("truth.json"), &truth)?;
    // ready to paste into a run config as its data source
    let src = CsvSource {
        path: "cohort.csv".into(),
        schema,
    };
    let snippet = toml::to_string(&DataFile { data: &src }).map_err(runtime)?;
    fs::write(out_dir.join("data.toml"), snippet).map_err(runtime)?;
    log::info!(
        "{} subjects, {:.1}% censored",
        cohort.len(),
        100.0 * truth.achieved_censoring
    );
    let outputs = ["cohort.csv", "truth.json", "data.toml"].map(String::from).to_vec();
    write_manifest(&out_dir.join("manifest.json"), "generate", cfg.hash(), cfg.seed, outputs)
}

fn cmd_impute(config: &ConfigArgs, scenario: Scenario, out_dir: &Path) -> Result<()> {
    let cfg = config.load()?;
    let cohort = load_run_cohort(&cfg)?;
    let design = build_design(&cohort, scenario);
    log::info!("{scenario}: {} features, {} missing cells", design.x.ncols(), design.n_missing());
    let imps = mice(
        &design.x,
        cfg.m_imputations,
        cfg.mice_iterations,
        derive_seed(cfg.seed, &format!("mice/{scenario}")),
    )
    .map_err(runtime)?;
    create_dir(out_dir)?;
    let mut outputs = Vec::new();
    for (m, x) in imps.datasets.iter().enumerate() {
        let name = format!("imputed_{m:02}.csv");
        save_dataset(out_dir.join(&name), &design.complete(x.clone())?)?;
        outputs.push(name);
    }
    write_manifest(&out_dir.join("manifest.json"), "impute", cfg.hash(), cfg.seed, outputs)
}

fn cmd_select(config: &ConfigArgs, input: &Path, penalty: Penalty, out_dir: &Path) -> Result<()> {
    let cfg = config.load()?;
    let ds = load_dataset(input)?;
    let z = apply_standardizer(&fit_standardizer(&ds)?, &ds)?;
    let alpha = cfg.alpha_for(penalty);
    let grid = default_lambda_grid(&z, alpha, cfg.selection.n_lambda, cfg.selection.lambda_min_ratio);
    let fit = fit_coxnet(
        &z,
        alpha,
        &grid,
        cfg.cv_folds,
        derive_seed(cfg.seed, &format!("coxnet/{}", penalty.label())),
        &cfg.selection.solver,
    )
    .map_err(runtime)?;
    let fallback = fit.selected.is_empty();
    let cols = if fallback {
        log::warn!("nothing selected at the CV lambda; keeping the first {} to enter", cfg.selection.top_k);
        path_top_k(&fit, cfg.selection.top_k)
    } else {
        fit.selected.clone()
    };
    let features: Vec<String> = cols.iter().map(|&j| z.feature_names[j].clone()).collect();
    let idx: Vec<usize> = features.iter().filter_map(|n| ds.column_index(n)).collect();
    create_dir(out_dir)?;
    save_dataset(out_dir.join("selected.csv"), &ds.select_columns(&idx))?;
    write_json(
        &out_dir.join("selection.json"),
        &SelectionFile {
            penalty,
            alpha,
            lambda: fit.lambda,
            features: &features,
            fallback_top_k: fallback,
            fit: &fit,
        },
    )?;
    println!("{}", features.join("\n"));
    let outputs = ["selected.csv", "selection.json"].map(String::from).to_vec();
    write_manifest(&out_dir.join("manifest.json"), "select", cfg.hash(), cfg.seed, outputs)
}

fn cmd_fit(config: &ConfigArgs, input: &Path, kind: ModelKind, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    let ds = load_dataset(input)?;
    let standardizer = fit_standardizer(&ds)?;
    let z = apply_standardizer(&standardizer, &ds)?;
    let model = match kind {
        ModelKind::Rsf => FittedModel::Rsf(
            fit_rsf(
                &z,
                &RsfParams {
                    seed: derive_seed(cfg.seed, "fit/rsf"),
                    ..cfg.rsf.clone()
                },
            )
            .map_err(runtime)?,
        ),
        ModelKind::Deepsurv => FittedModel::DeepSurv(
            fit_deepsurv(
                &z,
                &MlpConfig {
                    weight_init_seed: derive_seed(cfg.seed, "fit/deepsurv"),
                    ..cfg.deepsurv.clone()
                },
            )
            .map_err(runtime)?,
        ),
        ModelKind::Xgboost => FittedModel::Gbcox(
            fit_gbcox(
                &z,
                &GbcoxParams {
                    seed: derive_seed(cfg.seed, "fit/gbcox"),
                    ..cfg.gbcox.clone()
                },
            )
            .map_err(runtime)?,
        ),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &ModelFile { standardizer, model })?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(&out.with_extension("manifest.json"), "fit", cfg.hash(), cfg.seed, vec![name])
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    config: &ConfigArgs,
    model_paths: &[PathBuf],
    input: &Path,
    agg: AggArg,
    validation: Option<&Path>,
    repeats: usize,
    out_dir: &Path,
) -> Result<()> {
    let cfg = config.load()?;
    let models: Vec<ModelFile> = model_paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let ds = load_dataset(input)?;
    if agg == AggArg::None && models.len() != 1 {
        return Err(CliError::Invalid("several models need --agg ea or --agg bma".into()));
    }
    let weights = match agg {
        AggArg::Bma => {
            let path = validation.ok_or_else(|| CliError::Invalid("--agg bma needs --validation".into()))?;
            let val = load_dataset(path)?;
            let scores: Vec<Vec<f64>> = models.iter().map(|m| m.score(&val)).collect::<Result<_>>()?;
            Some(bma_weights_from_scores(&scores, &val.time, &val.event, None).map_err(runtime)?)
        }
        _ => None,
    };
    let score = |d: &SurvivalDataset| -> Result<Vec<f64>> {
        let raw: Vec<Vec<f64>> = models.iter().map(|m| m.score(d)).collect::<Result<_>>()?;
        if agg == AggArg::None {
            return Ok(raw.into_iter().next().expect("one model"));
        }
        let rs: Vec<RiskScores> = raw
            .into_iter()
            .zip(&models)
            .map(|(v, m)| RiskScores::new(m.model.id(), v))
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
        let out = match &weights {
            Some(w) => aggregate_bma(&rs, w),
            None => aggregate_ea(&rs),
        };
        out.map(|r| r.scores).map_err(runtime)
    };
    let s = score(&ds)?;
    let cindex = c_index(&s, &ds.time, &ds.event).map_err(runtime)?;
    let curve = auc_curve(&s, &ds.time, &ds.event).map_err(runtime)?;
    create_dir(out_dir)?;
    let metrics = MetricsFile {
        models: models.iter().map(|m| m.model.id()).collect(),
        agg,
        n: ds.n(),
        n_events: ds.n_events(),
        cindex,
        iauc: curve.iauc,
        auc_curve: curve.defined_points().map(|(t, a)| [t, a]).collect(),
        bma_weights: weights.as_ref().map(|w: &BmaWeights| w.weights.as_slice()),
    };
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    println!("c-index {cindex:.4}  iauc {:.4}", curve.iauc);
    let mut outputs = vec!["metrics.json".to_string()];
    if repeats > 0 {
        let scorer = |x: &ndarray::Array2<f64>| -> Vec<f64> {
            let d = SurvivalDataset { x: x.clone(), ..ds.clone() };
            score(&d).unwrap_or_else(|_| vec![0.0; x.nrows()])
        };
        let report = permutation_importance(
            scorer,
            &ds.x,
            &ds.feature_names,
            &ds.time,
            &ds.event,
            repeats,
            derive_seed(cfg.seed, "importance"),
        )
        .map_err(runtime)?;
        let path = out_dir.join("importance.csv");
        let mut f = fs::File::create(&path).map_err(runtime)?;
        writeln!(f, "feature,importance_mean,importance_sd").map_err(runtime)?;
        for fi in report.sorted_desc() {
            writeln!(f, "{},{},{}", fi.feature, fi.mean, fi.sd).map_err(runtime)?;
        }
        outputs.push("importance.csv".into());
    }
    write_manifest(&out_dir.join("manifest.json"), "evaluate", cfg.hash(), cfg.seed, outputs)
}

fn cmd_run(
    config: &ConfigArgs,
    agg: Option<&[Aggregation]>,
    scenarios: Option<&[Scenario]>,
    out_dir: &Path,
) -> Result<()> {
    let mut cfg = config.load()?;
    if let Some(a) = agg {
        cfg.aggregations = a.to_vec();
    }
    if let Some(s) = scenarios {
        cfg.scenarios = s.to_vec();
    }
    cfg.validate()?;
    let cohort = load_run_cohort(&cfg)?;
    log::info!("{} subjects, config {}", cohort.len(), cfg.hash());
    let report = survens_core::run(&cfg, &cohort)?;
    let mut outputs = write_report_dir(out_dir, &report)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(runtime)?;
    outputs.push("config.toml".into());
    write_manifest(&out_dir.join("manifest.json"), "run", cfg.hash(), cfg.seed, outputs)?;
    write_table_csv(std::io::stdout().lock(), &report, Metric::Cindex)?;
    for e in &report.errors {
        eprintln!(
            "warning: {}/{} failed at {}: {}",
            e.scenario,
            e.penalty.map(|p| p.label()).unwrap_or("*"),
            e.stage,
            e.message
        );
    }
    if report.cells.is_empty() {
        return Err(CliError::Runtime("every cell failed; see errors in report.json".into()));
    }
    Ok(())
}

fn cmd_report(input: &Path, metric: MetricArg, out_dir: Option<&Path>) -> Result<()> {
    let report = read_report(input).map_err(|e| CliError::Invalid(e.to_string()))?;
    let metric = match metric {
        MetricArg::Cindex => Metric::Cindex,
        MetricArg::Iauc => Metric::Iauc,
    };
    write_table_csv(std::io::stdout().lock(), &report, metric)?;
    if let Some(dir) = out_dir {
        let outputs = write_report_dir(dir, &report)?;
        write_manifest(&dir.join("manifest.json"), "report", report.config_hash.clone(), report.seed, outputs)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { config, out_dir } => cmd_generate(config, out_dir),
        Command::Impute {
            config,
            scenario,
            out_dir,
        } => cmd_impute(config, *scenario, out_dir),
        Command::Select {
            config,
            input,
            penalty,
            out_dir,
        } => cmd_select(config, input, *penalty, out_dir),
        Command::Fit {
            config,
            input,
            model,
            out,
        } => cmd_fit(config, input, *model, out),
        Command::Evaluate {
            config,
            models,
            input,
            agg,
            validation,
            importance_repeats,
            out_dir,
        } => cmd_evaluate(
            config,
            models,
            input,
            *agg,
            validation.as_deref(),
            *importance_repeats,
            out_dir,
        ),
        Command::Run {
            config,
            agg,
            scenario,
            out_dir,
        } => cmd_run(config, agg.as_deref(), scenario.as_deref(), out_dir),
        Command::Report { input, metric, out_dir } => cmd_report(input, *metric, out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help / --version print to stdout and succeed; usage errors are validation errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
