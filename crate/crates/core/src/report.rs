//! Joins feasibility tables with measured attack effects.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        ReportError::Schema(e.to_string())
    }
}

pub const FEASIBILITY_HEADER: [&str; 8] = [
    "arch",
    "patch_h",
    "patch_w",
    "mode",
    "log10_bound",
    "classes",
    "max_area",
    "max_side",
];

pub const REPORT_HEADER: [&str; 10] = [
    "arch",
    "patch_h",
    "patch_w",
    "mode",
    "log10_bound",
    "classes",
    "max_area",
    "max_side",
    "measured_changed_pixels",
    "verdict",
];

/// One feasibility result, as written by the `feasibility` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub arch: String,
    pub patch_h: usize,
    pub patch_w: usize,
    pub mode: String,
    pub log10_bound: f64,
    pub classes: u32,
    pub max_area: u64,
    pub max_side: u64,
}

/// Metrics written by the `attack` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub arch: String,
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_top: usize,
    pub patch_left: usize,
    pub changed_pixels: u64,
    pub agreement: f64,
    pub object_agreement: f64,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub seed: u64,
    pub within_influence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Exceeds,
    Within,
}

impl Verdict {
    /// Equality counts as within.
    pub fn classify(measured: u64, max_area: u64) -> Self {
        if measured > max_area {
            Verdict::Exceeds
        } else {
            Verdict::Within
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arch: String,
    pub patch_h: usize,
    pub patch_w: usize,
    pub mode: String,
    pub log10_bound: f64,
    pub classes: u32,
    pub max_area: u64,
    pub max_side: u64,
    pub measured_changed_pixels: Option<u64>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeasibilityReport {
    pub rows: Vec<ReportRow>,
}

fn row_order(a: &ReportRow, b: &ReportRow) -> Ordering {
    (
        &a.arch,
        a.patch_h * a.patch_w,
        a.patch_h,
        a.patch_w,
        &a.mode,
        a.classes,
    )
        .cmp(&(
            &b.arch,
            b.patch_h * b.patch_w,
            b.patch_h,
            b.patch_w,
            &b.mode,
            b.classes,
        ))
}

/// Attach the largest measured effect for each (arch, patch size) to every
/// matching feasibility row. Rows are sorted by arch, then patch area.
pub fn build_report(
    feasibility: &[FeasibilityRow],
    metrics: &[AttackMetrics],
) -> FeasibilityReport {
    let mut measured: HashMap<(&str, usize, usize), u64> = HashMap::new();
    for m in metrics {
        let e = measured
            .entry((m.arch.as_str(), m.patch_h, m.patch_w))
            .or_insert(0);
        *e = (*e).max(m.changed_pixels);
    }
    let mut rows: Vec<ReportRow> = feasibility
        .iter()
        .map(|f| {
            let m = measured
                .get(&(f.arch.as_str(), f.patch_h, f.patch_w))
                .copied();
            ReportRow {
                arch: f.arch.clone(),
                patch_h: f.patch_h,
                patch_w: f.patch_w,
                mode: f.mode.clone(),
                log10_bound: f.log10_bound,
                classes: f.classes,
                max_area: f.max_area,
                max_side: f.max_side,
                measured_changed_pixels: m,
                verdict: m.map(|m| Verdict::classify(m, f.max_area)),
            }
        })
        .collect();
    rows.sort_by(row_order);
    FeasibilityReport { rows }
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), ReportError> {
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found != expected {
        return Err(ReportError::Schema(format!(
            "expected columns {expected:?}, found {found:?}"
        )));
    }
    Ok(())
}

fn parse_rows<T: for<'de> Deserialize<'de>>(
    text: &str,
    header: &[&str],
) -> Result<Vec<T>, ReportError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut rdr, header)?;
    rdr.deserialize()
        .map(|r| r.map_err(ReportError::from))
        .collect()
}

fn write_rows<T: Serialize>(rows: &[T], header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}

pub fn parse_feasibility_csv(text: &str) -> Result<Vec<FeasibilityRow>, ReportError> {
    parse_rows(text, &FEASIBILITY_HEADER)
}

pub fn feasibility_to_csv(rows: &[FeasibilityRow]) -> String {
    write_rows(rows, &FEASIBILITY_HEADER)
}

/// Accepts a single metrics object or an array of them.
pub fn parse_metrics_json(text: &str) -> Result<Vec<AttackMetrics>, ReportError> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    Ok(match v {
        serde_json::Value::Array(_) => serde_json::from_value(v)?,
        _ => vec![serde_json::from_value(v)?],
    })
}

impl FeasibilityReport {
    pub fn to_csv(&self) -> String {
        write_rows(&self.rows, &REPORT_HEADER)
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        Ok(Self {
            rows: parse_rows(text, &REPORT_HEADER)?,
        })
    }
}
