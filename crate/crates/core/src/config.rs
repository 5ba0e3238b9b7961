//! Declarative run configuration (TOML) with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coxnet::{SolverOptions, DEFAULT_ELASTIC_NET_ALPHA, DEFAULT_LAMBDA_MIN_RATIO, DEFAULT_N_LAMBDA};
use crate::dataset::CohortSchema;
use crate::deepsurv::MlpConfig;
use crate::features::Scenario;
use crate::gbcox::GbcoxParams;
use crate::impute::DfRule;
use crate::rsf::RsfParams;
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("override `{key}`: `{segment}` is not a table")]
    NotATable { key: String, segment: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Lasso,
    ElasticNet,
}

impl Penalty {
    pub const ALL: [Penalty; 2] = [Penalty::Lasso, Penalty::ElasticNet];

    pub fn label(self) -> &'static str {
        match self {
            Penalty::Lasso => "lasso",
            Penalty::ElasticNet => "elastic_net",
        }
    }
}

impl std::str::FromStr for Penalty {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lasso" => Ok(Penalty::Lasso),
            "elastic_net" | "elasticnet" => Ok(Penalty::ElasticNet),
            other => Err(ConfigError::Invalid(format!("unknown penalty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Ea,
    Bma,
}

impl Aggregation {
    pub fn label(self) -> &'static str {
        match self {
            Aggregation::Ea => "ea",
            Aggregation::Bma => "bma",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ea" => Ok(Aggregation::Ea),
            "bma" => Ok(Aggregation::Bma),
            other => Err(ConfigError::Invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CohortSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub elastic_net_alpha: f64,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Fallback size when every imputation selects nothing.
    pub top_k: usize,
    pub solver: SolverOptions,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            elastic_net_alpha: DEFAULT_ELASTIC_NET_ALPHA,
            n_lambda: DEFAULT_N_LAMBDA,
            lambda_min_ratio: DEFAULT_LAMBDA_MIN_RATIO,
            top_k: 10,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupConfig {
    /// A static or categorical covariate; its first observed value is binned.
    pub column: String,
    /// Strictly increasing; bins are `[e_k, e_{k+1})`, the last one closed.
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    pub enabled: bool,
    pub scenario: Scenario,
    pub penalty: Penalty,
    pub repeats: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scenario: Scenario::ThreeVisits,
            penalty: Penalty::Lasso,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
    pub penalties: Vec<Penalty>,
    pub aggregations: Vec<Aggregation>,
    pub m_imputations: usize,
    pub mice_iterations: usize,
    pub cv_folds: usize,
    pub test_fraction: f64,
    pub ci_level: f64,
    pub df_rule: DfRule,
    pub selection: SelectionConfig,
    pub rsf: RsfParams,
    pub deepsurv: MlpConfig,
    pub gbcox: GbcoxParams,
    pub subgroup: Option<SubgroupConfig>,
    pub importance: ImportanceConfig,
    pub data: Option<CsvSource>,
    pub synth: Option<SynthConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenarios: Scenario::ALL.to_vec(),
            penalties: Penalty::ALL.to_vec(),
            aggregations: vec![Aggregation::Ea, Aggregation::Bma],
            m_imputations: 20,
            mice_iterations: 10,
            cv_folds: 5,
            test_fraction: 0.2,
            ci_level: 0.95,
            df_rule: DfRule::AsPublished,
            selection: SelectionConfig::default(),
            rsf: RsfParams::default(),
            deepsurv: MlpConfig::default(),
            gbcox: GbcoxParams::default(),
            subgroup: None,
            importance: ImportanceConfig::default(),
            data: None,
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a file; a relative `data.path` is resolved against its directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(data) = &mut cfg.data {
            if data.path.is_relative() {
                if let Some(dir) = path.parent() {
                    data.path = dir.join(&data.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.cv_folds < 2 {
            return bad(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if self.m_imputations < 2 {
            return bad(format!(
                "m_imputations must be at least 2 for pooling, got {}",
                self.m_imputations
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level must lie in (0, 1)".into());
        }
        if self.scenarios.is_empty() || self.penalties.is_empty() || self.aggregations.is_empty() {
            return bad("scenarios, penalties and aggregations must be non-empty".into());
        }
        let a = self.selection.elastic_net_alpha;
        if !(a > 0.0 && a <= 1.0) {
            return bad(format!("selection.elastic_net_alpha must lie in (0, 1], got {a}"));
        }
        if self.selection.n_lambda == 0 || !(self.selection.lambda_min_ratio > 0.0 && self.selection.lambda_min_ratio < 1.0) {
            return bad("selection.n_lambda must be positive and lambda_min_ratio in (0, 1)".into());
        }
        if let Some(sg) = &self.subgroup {
            if sg.edges.len() < 2 || sg.edges.windows(2).any(|w| !(w[0] < w[1])) {
                return bad("subgroup.edges must be strictly increasing with at least two values".into());
            }
        }
        if self.importance.enabled && self.importance.repeats == 0 {
            return bad("importance.repeats must be positive".into());
        }
        self.deepsurv
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("deepsurv: {e}")))?;
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => bad("set exactly one of [data] and [synth], not both".into()),
            _ => Ok(()),
        }
    }

    pub fn alpha_for(&self, p: Penalty) -> f64 {
        match p {
            Penalty::Lasso => 1.0,
            Penalty::ElasticNet => self.selection.elastic_net_alpha,
        }
    }

    /// Canonical TOML rendering; the basis of [`Self::hash`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value`, creating intermediate tables. The value is parsed as
/// a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for seg in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::NotATable {
            key: key.to_string(),
            segment: seg.to_string(),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
