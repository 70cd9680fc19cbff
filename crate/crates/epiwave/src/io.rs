//! File formats: incidence CSV ingestion, draw/diagnostic/summary CSV export,
//! and the ground-truth sidecar written next to synthetic datasets.
//!
//! Every floating-point value is printed with 17 significant digits, so
//! reading a file back reproduces the in-memory doubles bit for bit.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, IncidenceSeries, UnderReporting};
use crate::diagnostics::{Rhat, SummaryTable};
use crate::model::ParamVector;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: expected header `{want}`, found `{got}`")]
    BadHeader {
        path: PathBuf,
        want: &'static str,
        got: String,
    },
    #[error("{path}, line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

/// Render a double with 17 significant digits; parsing the result recovers
/// the original value exactly.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

const INCIDENCE_HEADER: &str = "day,date,count";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn row_err(path: &Path, line: u64, message: impl Into<String>) -> IoError {
    IoError::Row {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Write observed counts as `day,date,count`. Day offsets count from 1 (the
/// first observed day covers the model interval [0, 1]); the date column is
/// filled in when a start date is known and left empty otherwise.
pub fn write_incidence_csv(
    path: &Path,
    counts: &[u64],
    start_date: Option<NaiveDate>,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["day", "date", "count"]).map_err(csv_err(path))?;
    for (j, &count) in counts.iter().enumerate() {
        let date = match start_date {
            Some(d) => (d + chrono::Days::new(j as u64)).format("%Y-%m-%d").to_string(),
            None => String::new(),
        };
        w.write_record([(j + 1).to_string(), date, count.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a `day,date,count` file. Days must be the consecutive integers
/// 1, 2, ...; dates are optional but must be consistent with the first date
/// when present. Malformed rows report their line number.
pub fn read_incidence_csv(path: &Path, eta: UnderReporting) -> Result<IncidenceSeries, IoError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?;
    let got = header.iter().collect::<Vec<_>>().join(",");
    if got != INCIDENCE_HEADER {
        return Err(IoError::BadHeader {
            path: path.to_path_buf(),
            want: INCIDENCE_HEADER,
            got,
        });
    }

    let mut counts = Vec::new();
    let mut start_date: Option<NaiveDate> = None;
    for (idx, record) in r.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 2);
        if record.len() != 3 {
            return Err(row_err(path, line, format!("expected 3 fields, found {}", record.len())));
        }
        let day: i64 = record[0]
            .parse()
            .map_err(|_| row_err(path, line, format!("bad day `{}`", &record[0])))?;
        let want_day = counts.len() as i64 + 1;
        if day != want_day {
            return Err(row_err(
                path,
                line,
                format!("expected day {want_day}, found {day} (days must be 1, 2, ...)"),
            ));
        }
        if !record[1].is_empty() {
            let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d")
                .map_err(|_| row_err(path, line, format!("bad date `{}`", &record[1])))?;
            match start_date {
                None if counts.is_empty() => start_date = Some(date),
                None => {
                    return Err(row_err(path, line, "date appears after dateless rows"));
                }
                Some(start) => {
                    let want = start + chrono::Days::new(counts.len() as u64);
                    if date != want {
                        return Err(row_err(
                            path,
                            line,
                            format!("date {date} does not follow start date {start} (expected {want})"),
                        ));
                    }
                }
            }
        }
        let count: u64 = record[2]
            .parse()
            .map_err(|_| row_err(path, line, format!("bad count `{}`", &record[2])))?;
        counts.push(count);
    }
    Ok(IncidenceSeries::new(start_date, counts, eta)?)
}

/// Ground truth written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub seed: u64,
    /// Wave period/decay scale of the generating transmission curve.
    pub a: f64,
    /// Inverse amplitude of the generating transmission curve.
    pub b: f64,
    /// Negative Binomial dispersion actually used for the draws.
    pub generator_phi: f64,
    pub alpha: Option<f64>,
    pub gamma: f64,
    pub seed0: f64,
    pub phi_inv: f64,
    pub tau: f64,
    pub beta: Vec<f64>,
    /// Latent daily incidence means the counts were drawn around.
    pub daily_means: Vec<f64>,
}

pub fn write_truth_sidecar(path: &Path, truth: &TruthSidecar) -> Result<(), IoError> {
    let text = toml::to_string_pretty(truth).map_err(|e| IoError::Sidecar {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_truth_sidecar(path: &Path) -> Result<TruthSidecar, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| IoError::Sidecar {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write one chain's posterior draws, one row per draw, columns in natural
/// (constrained) space named after the parameter-vector fields.
pub fn write_draws_csv(path: &Path, names: &[String], draws: &[ParamVector]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(names).map_err(csv_err(path))?;
    for draw in draws {
        let row: Vec<String> = draw.as_slice().iter().map(|&x| fmt_full(x)).collect();
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// A draws CSV read back as named columns of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawsFile {
    pub names: Vec<String>,
    /// One inner vector per draw, in file order.
    pub rows: Vec<Vec<f64>>,
}

pub fn read_draws_csv(path: &Path) -> Result<DrawsFile, IoError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err(path))?;
    let names: Vec<String> = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 2);
        if record.len() != names.len() {
            return Err(row_err(
                path,
                line,
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        let mut row = Vec::with_capacity(names.len());
        for field in record.iter() {
            let x: f64 = field
                .parse()
                .map_err(|_| row_err(path, line, format!("bad number `{field}`")))?;
            row.push(x);
        }
        rows.push(row);
    }
    Ok(DrawsFile { names, rows })
}

/// One per-parameter convergence row of the diagnostics table.
#[derive(Debug, Clone)]
pub struct DiagnosticsRow {
    pub parameter: String,
    pub rhat: Rhat,
    pub split_rhat: Rhat,
    pub ess: f64,
}

fn rhat_field(r: &Rhat) -> String {
    match r {
        Rhat::Value(v) => fmt_full(*v),
        Rhat::Degenerate => "degenerate".to_string(),
    }
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticsRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["parameter", "rhat", "split_rhat", "ess"])
        .map_err(csv_err(path))?;
    for row in rows {
        w.write_record([
            row.parameter.clone(),
            rhat_field(&row.rhat),
            rhat_field(&row.split_rhat),
            fmt_full(row.ess),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// One per-chain row of the chain statistics table.
#[derive(Debug, Clone)]
pub struct ChainStatsRow {
    pub chain: usize,
    pub draws: usize,
    pub accept_rate: f64,
    pub integration_failures: usize,
}

pub fn write_chain_stats_csv(path: &Path, rows: &[ChainStatsRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["chain", "draws", "accept_rate", "integration_failures"])
        .map_err(csv_err(path))?;
    for row in rows {
        w.write_record([
            row.chain.to_string(),
            row.draws.to_string(),
            fmt_full(row.accept_rate),
            row.integration_failures.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a day-indexed quantile table as `day,q025,median,q975`.
pub fn write_summary_csv(path: &Path, table: &SummaryTable) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["day", "q025", "median", "q975"])
        .map_err(csv_err(path))?;
    for i in 0..table.days.len() {
        w.write_record([
            fmt_full(table.days[i]),
            fmt_full(table.q025[i]),
            fmt_full(table.median[i]),
            fmt_full(table.q975[i]),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}
