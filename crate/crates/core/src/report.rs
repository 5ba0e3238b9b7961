//! Report artifacts: JSON, the flat per-cell CSV, wide per-metric tables and
//! the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{CellResult, RunReport, BASE_MODELS};

/// Column order of `report.csv`; bump [`CSV_LAYOUT_VERSION`] when it changes.
pub const REPORT_CSV_COLUMNS: [&str; 10] = [
    "scenario",
    "penalty",
    "model",
    "agg",
    "cindex_mean",
    "cindex_lo",
    "cindex_hi",
    "iauc_mean",
    "iauc_lo",
    "iauc_hi",
];
pub const CSV_LAYOUT_VERSION: u32 = 1;
/// Wide-table model columns.
pub const TABLE_COLUMNS: [&str; 5] = ["RSF", "DeepSurv", "XGBoost", "EA", "BMA"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cindex,
    Iauc,
}

fn row(c: &CellResult) -> Vec<String> {
    vec![
        c.scenario.label().to_string(),
        c.penalty.label().to_string(),
        c.model.clone(),
        c.agg.clone(),
        c.cindex.mean.to_string(),
        c.cindex.ci_low.to_string(),
        c.cindex.ci_high.to_string(),
        c.iauc.mean.to_string(),
        c.iauc.ci_low.to_string(),
        c.iauc.ci_high.to_string(),
    ]
}

pub fn write_report_csv<W: Write>(w: W, cells: &[CellResult]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_CSV_COLUMNS)?;
    for c in cells {
        out.write_record(row(c))?;
    }
    out.flush().map_err(|source| ReportError::Io {
        path: PathBuf::from("<report.csv>"),
        source,
    })?;
    Ok(())
}

fn table_key(column: &str) -> (&'static str, &'static str) {
    match column {
        "RSF" => (BASE_MODELS[0], "none"),
        "DeepSurv" => (BASE_MODELS[1], "none"),
        "XGBoost" => (BASE_MODELS[2], "none"),
        "EA" => ("ensemble", "ea"),
        _ => ("ensemble", "bma"),
    }
}

/// One row per scenario x penalty, one column per learner / aggregation,
/// each cell `mean (lo, hi)` at three decimals; `NA` where the cell failed.
pub fn write_table_csv<W: Write>(w: W, report: &RunReport, metric: Metric) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["scenario", "penalty"];
    header.extend(TABLE_COLUMNS);
    out.write_record(&header)?;
    for &s in &report.scenarios {
        for &p in &report.penalties {
            let mut rec = vec![s.label().to_string(), p.label().to_string()];
            for col in TABLE_COLUMNS {
                let (model, agg) = table_key(col);
                let cell = report.cell(s, p, model, agg).map(|c| match metric {
                    Metric::Cindex => &c.cindex,
                    Metric::Iauc => &c.iauc,
                });
                rec.push(match cell {
                    Some(e) => format!("{:.3} ({:.3}, {:.3})", e.mean, e.ci_low, e.ci_high),
                    None => "NA".into(),
                });
            }
            out.write_record(&rec)?;
        }
    }
    out.flush().map_err(|source| ReportError::Io {
        path: PathBuf::from("<table>"),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub csv_layout_version: u32,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, outputs: Vec<String>) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: "survens".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            seed,
            csv_layout_version: CSV_LAYOUT_VERSION,
            created_unix,
            outputs,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport, ReportError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Write `report.json`, `report.csv`, `table_cindex.csv` and
/// `table_iauc.csv` into `dir`; returns the file names written.
pub fn write_report_dir(dir: &Path, report: &RunReport) -> Result<Vec<String>, ReportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("report.json"), report)?;
    let create = |name: &str| -> Result<BufWriter<File>, ReportError> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
    };
    write_report_csv(create("report.csv")?, &report.cells)?;
    write_table_csv(create("table_cindex.csv")?, report, Metric::Cindex)?;
    write_table_csv(create("table_iauc.csv")?, report, Metric::Iauc)?;
    Ok(["report.json", "report.csv", "table_cindex.csv", "table_iauc.csv"]
        .map(String::from)
        .to_vec())
}
