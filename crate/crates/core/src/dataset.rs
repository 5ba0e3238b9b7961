//! Cohort data model and the per-subject survival dataset.
//!
//! A [`CohortTable`] is the long-format view: one record per subject, each
//! carrying its visits in ascending time order. A [`SurvivalDataset`] is the
//! flat per-subject matrix every learner consumes.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` named in the schema is not in the header")]
    MissingColumn(String),
    #[error("line {line}: column `{column}` has non-numeric value `{value}`")]
    MalformedRow {
        line: usize,
        column: String,
        value: String,
    },
    #[error("subject `{id}` has two rows at visit time {time}")]
    DuplicateVisit { id: String, time: f64 },
    #[error("line {line}: outcome column `{column}` is empty")]
    MissingOutcome { line: usize, column: String },
    #[error("subject `{0}` has conflicting outcome values across rows")]
    InconsistentOutcome(String),
    #[error("subject `{0}` appears more than once")]
    DuplicateSubject(String),
    #[error("subject `{0}` has no visits")]
    NoVisits(String),
    #[error("subject `{0}`: visits are not strictly ascending in time")]
    UnsortedVisits(String),
    #[error("subject `{id}`: first visit is at {time} months, expected 0")]
    BaselineNotZero { id: String, time: f64 },
    #[error("subject `{0}`: event time precedes a predictor visit")]
    EventBeforeLastVisit(String),
    #[error("subject `{0}`: invalid outcome (event time must be positive and finite)")]
    InvalidOutcome(String),
    #[error("subject `{0}`: visit width does not match the covariate list")]
    WidthMismatch(String),
    #[error("`{0}` is flagged but is not a covariate")]
    UnknownCovariate(String),
    #[error("dataset shape mismatch: {0}")]
    Shape(String),
    #[error("dataset contains a missing or non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Maps CSV columns to their roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSchema {
    pub id: String,
    pub visit_time: String,
    pub event_time: String,
    pub event: String,
    /// Covariate columns in order. Empty means every column not bound to
    /// another role, in header order.
    pub covariates: Vec<String>,
    /// Categorical covariates (integer level codes). Never receive deltas.
    pub categorical: Vec<String>,
    /// Numeric covariates measured once (demographics, genotype, ...).
    #[serde(rename = "static")]
    pub static_covariates: Vec<String>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            visit_time: "visit_time".into(),
            event_time: "event_time".into(),
            event: "event".into(),
            covariates: Vec::new(),
            categorical: Vec::new(),
            static_covariates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time_months: f64,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub visits: Vec<Visit>,
    pub event_time_months: f64,
    /// `true` = progressed, `false` = censored.
    pub event: bool,
}

impl SubjectRecord {
    /// First observed value of covariate `j` scanning visits in time order.
    pub fn first_observed(&self, j: usize) -> Option<f64> {
        self.visits.iter().find_map(|v| v.values[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    subjects: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
    categorical_names: Vec<String>,
    static_names: Vec<String>,
}

impl CohortTable {
    pub fn new(
        subjects: Vec<SubjectRecord>,
        covariate_names: Vec<String>,
        categorical_names: Vec<String>,
        static_names: Vec<String>,
    ) -> Result<Self> {
        for name in categorical_names.iter().chain(&static_names) {
            if !covariate_names.contains(name) {
                return Err(DatasetError::UnknownCovariate(name.clone()));
            }
        }
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateSubject(s.id.clone()));
            }
            validate_subject(s, covariate_names.len())?;
        }
        Ok(Self {
            subjects,
            covariate_names,
            categorical_names,
            static_names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn categorical_names(&self) -> &[String] {
        &self.categorical_names
    }

    pub fn static_names(&self) -> &[String] {
        &self.static_names
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn is_categorical(&self, j: usize) -> bool {
        self.categorical_names.contains(&self.covariate_names[j])
    }

    /// Longitudinal covariates are numeric, non-static, and get delta features.
    pub fn is_longitudinal(&self, j: usize) -> bool {
        let name = &self.covariate_names[j];
        !self.categorical_names.contains(name) && !self.static_names.contains(name)
    }

    pub fn n_missing(&self) -> usize {
        self.subjects
            .iter()
            .flat_map(|s| &s.visits)
            .flat_map(|v| &v.values)
            .filter(|v| v.is_none())
            .count()
    }

    /// Keep each subject's first `max_visits` visits. Outcomes are untouched.
    pub fn truncate_visits(&self, max_visits: usize) -> CohortTable {
        assert!(max_visits >= 1, "max_visits must be at least 1");
        let mut out = self.clone();
        for s in &mut out.subjects {
            s.visits.truncate(max_visits);
        }
        out
    }

    /// Restrict to the subjects whose ids are in `keep`, preserving order.
    pub fn filter_subjects(&self, keep: &HashSet<&str>) -> CohortTable {
        let mut out = self.clone();
        out.subjects.retain(|s| keep.contains(s.id.as_str()));
        out
    }
}

fn validate_subject(s: &SubjectRecord, width: usize) -> Result<()> {
    let Some(first) = s.visits.first() else {
        return Err(DatasetError::NoVisits(s.id.clone()));
    };
    if first.time_months != 0.0 {
        return Err(DatasetError::BaselineNotZero {
            id: s.id.clone(),
            time: first.time_months,
        });
    }
    if !(s.event_time_months.is_finite() && s.event_time_months > 0.0) {
        return Err(DatasetError::InvalidOutcome(s.id.clone()));
    }
    for pair in s.visits.windows(2) {
        if !(pair[1].time_months > pair[0].time_months) {
            return Err(DatasetError::UnsortedVisits(s.id.clone()));
        }
    }
    if s.visits.iter().any(|v| v.values.len() != width) {
        return Err(DatasetError::WidthMismatch(s.id.clone()));
    }
    let last = s.visits.last().map(|v| v.time_months).unwrap_or(0.0);
    if s.event_time_months < last {
        return Err(DatasetError::EventBeforeLastVisit(s.id.clone()));
    }
    Ok(())
}

fn parse_number(raw: &str, line: usize, column: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DatasetError::MalformedRow {
            line,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

fn parse_event(raw: &str, line: usize, column: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Ok(true),
        "0" | "0.0" | "false" => Ok(false),
        _ => Err(DatasetError::MalformedRow {
            line,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<CohortTable> {
    let file = std::fs::File::open(path)?;
    read_cohort(file, schema)
}

/// Parse a long-format CSV (one row per subject-visit).
pub fn read_cohort<R: Read>(reader: R, schema: &CohortSchema) -> Result<CohortTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.visit_time)?;
    let et_col = col(&schema.event_time)?;
    let ev_col = col(&schema.event)?;
    let reserved = [id_col, time_col, et_col, ev_col];

    let covariate_names: Vec<String> = if schema.covariates.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved.contains(i))
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let cov_cols = covariate_names
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    struct Pending {
        visits: Vec<Visit>,
        event_time: f64,
        event: bool,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = row_idx + 2;
        let id = record.get(id_col).unwrap_or("").to_string();
        let time = parse_number(record.get(time_col).unwrap_or(""), line, &schema.visit_time)?;
        let raw_et = record.get(et_col).unwrap_or("");
        if raw_et.is_empty() {
            return Err(DatasetError::MissingOutcome {
                line,
                column: schema.event_time.clone(),
            });
        }
        let raw_ev = record.get(ev_col).unwrap_or("");
        if raw_ev.is_empty() {
            return Err(DatasetError::MissingOutcome {
                line,
                column: schema.event.clone(),
            });
        }
        let event_time = parse_number(raw_et, line, &schema.event_time)?;
        let event = parse_event(raw_ev, line, &schema.event)?;
        let values = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| {
                let raw = record.get(c).unwrap_or("");
                if raw.is_empty() {
                    Ok(None)
                } else {
                    parse_number(raw, line, name).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending {
                visits: Vec::new(),
                event_time,
                event,
            }
        });
        if entry.event_time != event_time || entry.event != event {
            return Err(DatasetError::InconsistentOutcome(id));
        }
        if entry.visits.iter().any(|v| v.time_months == time) {
            return Err(DatasetError::DuplicateVisit { id, time });
        }
        entry.visits.push(Visit {
            time_months: time,
            values,
        });
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let mut p = pending.remove(&id).expect("id recorded in order");
            p.visits
                .sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
            SubjectRecord {
                id,
                visits: p.visits,
                event_time_months: p.event_time,
                event: p.event,
            }
        })
        .collect();

    CohortTable::new(
        subjects,
        covariate_names,
        schema.categorical.clone(),
        schema.static_covariates.clone(),
    )
}

pub fn save_cohort(
    path: impl AsRef<Path>,
    cohort: &CohortTable,
    schema: &CohortSchema,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_cohort(file, cohort, schema)
}

/// Write long-format CSV. Floats use the shortest representation that
/// parses back to the identical `f64`.
pub fn write_cohort<W: Write>(writer: W, cohort: &CohortTable, schema: &CohortSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.id.clone(), schema.visit_time.clone()];
    header.extend(cohort.covariate_names.iter().cloned());
    header.push(schema.event_time.clone());
    header.push(schema.event.clone());
    w.write_record(&header)?;
    for s in &cohort.subjects {
        for v in &s.visits {
            let mut row = Vec::with_capacity(header.len());
            row.push(s.id.clone());
            row.push(v.time_months.to_string());
            row.extend(
                v.values
                    .iter()
                    .map(|x| x.map(|x| x.to_string()).unwrap_or_default()),
            );
            row.push(s.event_time_months.to_string());
            row.push(if s.event { "1" } else { "0" }.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// How a design column was produced; one-hot columns bypass standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    OneHot,
}

impl FeatureKind {
    /// One-hot columns are named `<categorical>=<level>`.
    pub fn infer(name: &str) -> Self {
        if name.contains('=') {
            FeatureKind::OneHot
        } else {
            FeatureKind::Numeric
        }
    }
}

/// Per-subject design matrix plus outcome. `x` is complete (no NaN).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    pub x: Array2<f64>,
    pub feature_names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub ids: Vec<String>,
}

impl SurvivalDataset {
    pub fn new(
        x: Array2<f64>,
        feature_names: Vec<String>,
        time: Vec<f64>,
        event: Vec<bool>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let kinds = feature_names.iter().map(|n| FeatureKind::infer(n)).collect();
        Self::with_kinds(x, feature_names, kinds, time, event, ids)
    }

    pub fn with_kinds(
        x: Array2<f64>,
        feature_names: Vec<String>,
        kinds: Vec<FeatureKind>,
        time: Vec<f64>,
        event: Vec<bool>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = x.dim();
        if feature_names.len() != p || kinds.len() != p {
            return Err(DatasetError::Shape(format!(
                "{p} columns but {} names / {} kinds",
                feature_names.len(),
                kinds.len()
            )));
        }
        if time.len() != n || event.len() != n || ids.len() != n {
            return Err(DatasetError::Shape(format!(
                "{n} rows but {} times / {} events / {} ids",
                time.len(),
                event.len(),
                ids.len()
            )));
        }
        if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DatasetError::NonFinite { row, col });
        }
        if let Some(i) = time.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(DatasetError::InvalidOutcome(ids[i].clone()));
        }
        Ok(Self {
            x,
            feature_names,
            kinds,
            time,
            event,
            ids,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|e| **e).count()
    }

    pub fn subset_rows(&self, rows: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            x: self.x.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            kinds: self.kinds.clone(),
            time: rows.iter().map(|&i| self.time[i]).collect(),
            event: rows.iter().map(|&i| self.event[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            x: self.x.select(Axis(1), cols),
            feature_names: cols.iter().map(|&j| self.feature_names[j].clone()).collect(),
            kinds: cols.iter().map(|&j| self.kinds[j]).collect(),
            time: self.time.clone(),
            event: self.event.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }
}

/// Read a completed dataset CSV: `id, <features...>, time, event`.
pub fn read_dataset<R: Read>(reader: R) -> Result<SurvivalDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "id" || header[header.len() - 2] != "time" || header[header.len() - 1] != "event" {
        return Err(DatasetError::Shape(
            "dataset header must be `id, <features...>, time, event`".into(),
        ));
    }
    let names: Vec<String> = header[1..header.len() - 2].to_vec();
    let p = names.len();
    let mut data = Vec::new();
    let (mut time, mut event, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row_idx + 2;
        ids.push(rec.get(0).unwrap_or("").to_string());
        for (j, name) in names.iter().enumerate() {
            data.push(parse_number(rec.get(j + 1).unwrap_or(""), line, name)?);
        }
        time.push(parse_number(rec.get(p + 1).unwrap_or(""), line, "time")?);
        event.push(parse_event(rec.get(p + 2).unwrap_or(""), line, "event")?);
    }
    let x = Array2::from_shape_vec((ids.len(), p), data)
        .map_err(|e| DatasetError::Shape(e.to_string()))?;
    SurvivalDataset::new(x, names, time, event, ids)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SurvivalDataset> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn write_dataset<W: Write>(writer: W, ds: &SurvivalDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    header.push("time".into());
    header.push("event".into());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row = Vec::with_capacity(header.len());
        row.push(ds.ids[i].clone());
        row.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        row.push(ds.time[i].to_string());
        row.push(if ds.event[i] { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &SurvivalDataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CohortSchema {
        CohortSchema {
            static_covariates: vec!["age".into()],
            ..CohortSchema::default()
        }
    }

    #[test]
    fn three_rows_one_subject() {
        let csv = "id,visit_time,age,mmse,event_time,event\n\
                   S1,6.0,70,28,30,1\n\
                   S1,0,70,29,30,1\n\
                   S1,12.0,70,,30,1\n";
        let c = read_cohort(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.subjects()[0];
        assert_eq!(s.visits.len(), 3);
        let times: Vec<f64> = s.visits.iter().map(|v| v.time_months).collect();
        assert_eq!(times, vec![0.0, 6.0, 12.0]);
        assert_eq!(s.visits[2].values, vec![Some(70.0), None]);
        assert_eq!(c.covariate_names(), &["age".to_string(), "mmse".to_string()]);
        assert!(!c.is_longitudinal(0));
        assert!(c.is_longitudinal(1));
    }

    #[test]
    fn duplicate_visit_rejected() {
        let csv = "id,visit_time,x,event_time,event\nS1,0,1,10,0\nS1,6.0,2,10,0\nS1,6.0,3,10,0\n";
        let err = read_cohort(csv.as_bytes(), &CohortSchema::default()).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateVisit { ref id, time } if id == "S1" && time == 6.0));
    }

    #[test]
    fn malformed_and_missing_outcome() {
        let csv = "id,visit_time,x,event_time,event\nS1,0,abc,10,0\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &CohortSchema::default()),
            Err(DatasetError::MalformedRow { line: 2, .. })
        ));
        let csv = "id,visit_time,x,event_time,event\nS1,0,1,,0\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &CohortSchema::default()),
            Err(DatasetError::MissingOutcome { .. })
        ));
        let csv = "id,visit_time,x,event_time,event\nS1,0,1,10,\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &CohortSchema::default()),
            Err(DatasetError::MissingOutcome { .. })
        ));
    }

    #[test]
    fn baseline_must_be_zero() {
        let csv = "id,visit_time,x,event_time,event\nS1,1,1,10,0\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &CohortSchema::default()),
            Err(DatasetError::BaselineNotZero { .. })
        ));
    }

    fn five_visit_cohort() -> CohortTable {
        let visits = (0..5)
            .map(|k| Visit {
                time_months: 6.0 * k as f64,
                values: vec![Some(k as f64)],
            })
            .collect();
        let one = SubjectRecord {
            id: "a".into(),
            visits,
            event_time_months: 40.0,
            event: true,
        };
        let two = SubjectRecord {
            id: "b".into(),
            visits: vec![Visit {
                time_months: 0.0,
                values: vec![None],
            }],
            event_time_months: 3.0,
            event: false,
        };
        CohortTable::new(vec![one, two], vec!["x".into()], vec![], vec![]).unwrap()
    }

    #[test]
    fn truncate_keeps_leading_visits() {
        let c = five_visit_cohort();
        let t = c.truncate_visits(3);
        let kept: Vec<f64> = t.subjects()[0].visits.iter().map(|v| v.time_months).collect();
        assert_eq!(kept, vec![0.0, 6.0, 12.0]);
        assert_eq!(t.subjects()[1], c.subjects()[1]);
        assert_eq!(t.truncate_visits(3), t);
        let base = c.truncate_visits(1);
        assert!(base.subjects().iter().all(|s| s.visits.len() == 1));
        assert_eq!(base.subjects()[0].event_time_months, 40.0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 1.0, -3.5, 0.0]).unwrap();
        let ds = SurvivalDataset::new(
            x,
            vec!["a".into(), "c1=1".into()],
            vec![1.5, 2.0],
            vec![true, false],
            vec!["s1".into(), "s2".into()],
        )
        .unwrap();
        assert_eq!(ds.kinds, vec![FeatureKind::Numeric, FeatureKind::OneHot]);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn dataset_rejects_nan() {
        let x = Array2::from_shape_vec((1, 1), vec![f64::NAN]).unwrap();
        let err = SurvivalDataset::new(x, vec!["a".into()], vec![1.0], vec![true], vec!["s".into()]);
        assert!(matches!(err, Err(DatasetError::NonFinite { row: 0, col: 0 })));
    }
}
