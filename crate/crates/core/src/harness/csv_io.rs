//! Frozen CSV schemas.
//!
//! * runs: `method,seed,segment,corruption,severity,examples,error` (long
//!   format, one row per segment, error in %)
//! * summary: `method,seed,avg_error,config_hash,stream_hash`
//! * sweep: `axis,value,method,seed,avg_error`
//!
//! Floats are written in their shortest round-trip form, so identical runs
//! produce byte-identical files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::RunReport;
use crate::adapt::Method;
use crate::error::{Error, Result};
use crate::synth_data::CorruptionSpec;

pub const RUNS_COLUMNS: [&str; 7] = ["method", "seed", "segment", "corruption", "severity", "examples", "error"];
pub const SUMMARY_COLUMNS: [&str; 5] = ["method", "seed", "avg_error", "config_hash", "stream_hash"];
pub const SWEEP_COLUMNS: [&str; 5] = ["axis", "value", "method", "seed", "avg_error"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub method: Method,
    pub seed: u64,
    pub avg_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub seed: u64,
    pub avg_error: f64,
    pub config_hash: String,
    pub stream_hash: String,
}

impl From<&RunReport> for SummaryRow {
    fn from(r: &RunReport) -> Self {
        Self {
            method: r.method,
            seed: r.seed,
            avg_error: r.avg_error,
            config_hash: r.config_hash.clone(),
            stream_hash: r.stream_hash.clone(),
        }
    }
}

#[derive(Serialize)]
struct RunRow<'a> {
    method: Method,
    seed: u64,
    segment: usize,
    corruption: &'a str,
    severity: f64,
    examples: usize,
    error: f64,
}

pub fn write_runs_csv<W: Write>(w: W, reports: &[RunReport], segments: &[CorruptionSpec]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        for (i, (&e, &n)) in r.segment_errors.iter().zip(&r.segment_counts).enumerate() {
            let spec = segments.get(i).ok_or_else(|| Error::Shape(format!("no segment {i} in schedule")))?;
            out.serialize(RunRow {
                method: r.method,
                seed: r.seed,
                segment: i,
                corruption: spec.kind.name(),
                severity: spec.severity,
                examples: n,
                error: e,
            })?;
        }
    }
    if reports.is_empty() {
        out.write_record(RUNS_COLUMNS)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(w: W, reports: &[RunReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if reports.is_empty() {
        out.write_record(SUMMARY_COLUMNS)?;
    }
    for r in reports {
        out.serialize(SummaryRow::from(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(SWEEP_COLUMNS)?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sweep CSV; every column of the sweep schema must be present.
pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let missing: Vec<&str> = SWEEP_COLUMNS.iter().copied().filter(|c| !headers.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("sweep CSV lacks columns: {}", missing.join(", "))));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?)
}

/// Reads a summary or sweep CSV into `(method, avg_error)` rows.
pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<(Method, f64)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("CSV lacks a `{name}` column")))
    };
    let (m, e) = (col("method")?, col("avg_error")?);
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let method: Method = rec[m].parse()?;
            let err: f64 = rec[e].parse().map_err(|_| Error::Format(format!("bad avg_error `{}`", &rec[e])))?;
            Ok((method, err))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

/// Mean ± std per method, in order of first appearance.
pub fn summarize(rows: &[(Method, f64)]) -> Vec<MethodSummary> {
    let mut order: Vec<Method> = Vec::new();
    for (m, _) in rows {
        if !order.contains(m) {
            order.push(*m);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let v: Vec<f64> = rows.iter().filter(|(m, _)| *m == method).map(|(_, e)| *e).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std =
                if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            MethodSummary { method, mean, std, runs: v.len() }
        })
        .collect()
}
