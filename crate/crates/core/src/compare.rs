//! Checks report cells against a reference table of expected values.
//!
//! Reference format (CSV, `#` comments allowed):
//! `table,factor,metric,expected,abs_tol,note`. `metric` is a report metric
//! name, or `group.metric` for subgroup rows. `expected` is a number compared
//! within `abs_tol`, or text compared exactly. Cells whose note starts with
//! `known-discrepancy` are reported but excluded from the verdict unless
//! explicitly included.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Factor;
use crate::report::{fmt3, report_cells, AnalysisReport, CellValue};

pub const REFERENCE_HEADER: [&str; 6] = ["table", "factor", "metric", "expected", "abs_tol", "note"];

/// Note prefix marking a cell that is known not to reproduce.
pub const KNOWN_DISCREPANCY: &str = "known-discrepancy";

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("cannot read reference {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("reference header mismatch: expected `{}`, found `{found}`", REFERENCE_HEADER.join(","))]
    Header { found: String },
    #[error("reference line {line}: {message}")]
    Malformed { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Expected {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCell {
    pub line: u64,
    pub table: String,
    pub factor: Factor,
    pub metric: String,
    pub expected: Expected,
    pub abs_tol: f64,
    pub note: String,
}

impl ReferenceCell {
    pub fn is_known_discrepancy(&self) -> bool {
        self.note.starts_with(KNOWN_DISCREPANCY)
    }
}

pub fn parse_reference(text: &str) -> Result<Vec<ReferenceCell>, CompareError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CompareError::Header {
        found: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if found != REFERENCE_HEADER {
        return Err(CompareError::Header {
            found: found.join(","),
        });
    }

    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CompareError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| CompareError::Malformed { line, message };
        if record.len() < 5 || record.len() > 6 {
            return Err(bad(format!("expected 5 or 6 fields, found {}", record.len())));
        }
        let table = record[0].to_owned();
        let metric = record[2].to_owned();
        if table.is_empty() || metric.is_empty() {
            return Err(bad("table and metric must be non-empty".into()));
        }
        let factor = record[1].parse::<Factor>().map_err(bad)?;
        let expected = match record[3].parse::<f64>() {
            Ok(v) if v.is_finite() => Expected::Number(v),
            Ok(v) => return Err(bad(format!("expected value {v} is not finite"))),
            Err(_) if !record[3].is_empty() => Expected::Text(record[3].to_owned()),
            Err(_) => return Err(bad("expected value is empty".into())),
        };
        let abs_tol = match (&expected, record[4].is_empty()) {
            (Expected::Text(_), true) => 0.0,
            _ => record[4]
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| bad(format!("abs_tol `{}` is not a non-negative number", &record[4])))?,
        };
        cells.push(ReferenceCell {
            line,
            table,
            factor,
            metric,
            expected,
            abs_tol,
            note: record.get(5).unwrap_or("").to_owned(),
        });
    }
    Ok(cells)
}

pub fn load_reference(path: impl AsRef<Path>) -> Result<Vec<ReferenceCell>, CompareError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CompareError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_reference(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The report has no such cell.
    Missing,
    /// Known discrepancy, not counted.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffRow {
    pub reference: ReferenceCell,
    pub computed: Option<String>,
    pub computed_value: Option<f64>,
    pub delta: Option<f64>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<DiffRow>,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .all(|r| matches!(r.status, Status::Pass | Status::Excluded))
    }

    pub fn count(&self, status: Status) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &DiffRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.status, Status::Fail | Status::Missing))
    }
}

/// Compares every reference cell with the report.
pub fn compare(
    report: &AnalysisReport,
    reference: &[ReferenceCell],
    include_known: bool,
) -> Comparison {
    let cells: BTreeMap<(String, Factor, String), CellValue> = report_cells(report)
        .into_iter()
        .map(|c| ((c.table.to_owned(), c.factor, c.qualified_metric()), c.value))
        .collect();

    let rows = reference
        .iter()
        .map(|r| {
            let computed = cells.get(&(r.table.clone(), r.factor, r.metric.clone()));
            let (delta, ok) = match (computed, &r.expected) {
                (None, _) => (None, false),
                (Some(v), Expected::Number(e)) => match v.as_f64() {
                    Some(x) => {
                        let d = (x - e).abs();
                        (Some(d), d <= r.abs_tol)
                    }
                    None => (None, false),
                },
                (Some(v), Expected::Text(e)) => (None, v.render() == *e),
            };
            let status = if r.is_known_discrepancy() && !include_known {
                Status::Excluded
            } else if computed.is_none() {
                Status::Missing
            } else if ok {
                Status::Pass
            } else {
                Status::Fail
            };
            DiffRow {
                reference: r.clone(),
                computed: computed.map(CellValue::render),
                computed_value: computed.and_then(CellValue::as_f64),
                delta,
                status,
            }
        })
        .collect();
    Comparison { rows }
}

/// Fixed-width diff table, one line per reference cell.
pub fn render_diff(cmp: &Comparison) -> String {
    let mut out = format!(
        "{:<17} {:<23} {:<22} {:>10} {:>10} {:>9} {:>8}  {}\n",
        "table", "factor", "metric", "computed", "expected", "|delta|", "tol", "status"
    );
    for row in &cmp.rows {
        let r = &row.reference;
        let expected = match &r.expected {
            Expected::Number(v) if v.fract() == 0.0 => format!("{v}"),
            Expected::Number(v) => fmt3(*v),
            Expected::Text(s) => s.clone(),
        };
        let status = match row.status {
            Status::Pass => "ok",
            Status::Fail => "FAIL",
            Status::Missing => "MISSING",
            Status::Excluded => "excluded",
        };
        let _ = write!(
            out,
            "{:<17} {:<23} {:<22} {:>10} {:>10} {:>9} {:>8}  {}",
            r.table,
            r.factor.name(),
            r.metric,
            row.computed.as_deref().unwrap_or("-"),
            expected,
            row.delta.map_or_else(|| "-".to_owned(), |d| format!("{d:.4}")),
            format!("{}", r.abs_tol),
            status
        );
        if !r.note.is_empty() && row.status != Status::Pass {
            let _ = write!(out, "  ({})", r.note);
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "{} cells: {} ok, {} failed, {} missing, {} excluded",
        cmp.rows.len(),
        cmp.count(Status::Pass),
        cmp.count(Status::Fail),
        cmp.count(Status::Missing),
        cmp.count(Status::Excluded)
    );
    out
}
