//! CSV/JSON tables and gnuplot-readable curve files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pareto::Objectives;
use super::records::TradeoffRecord;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 9] = [
    "method",
    "acc_pct",
    "nonzeros",
    "size_mb",
    "compr_x",
    "lat_ms_mean",
    "lat_ms_std",
    "speedup_x",
    "rel_bops_pct",
];

const MB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::config(format!(
                "unknown report format {other:?}, expected csv or json"
            ))),
        }
    }
}

/// One table row. `threads` travels with the row but is not a column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub acc_pct: f64,
    pub nonzeros: u64,
    pub size_mb: f64,
    pub compr_x: f64,
    pub lat_ms_mean: f64,
    pub lat_ms_std: f64,
    pub speedup_x: f64,
    pub rel_bops_pct: f64,
    pub threads: usize,
}

impl From<&TradeoffRecord> for ReportRow {
    fn from(r: &TradeoffRecord) -> Self {
        Self {
            method: r.method.clone(),
            acc_pct: r.accuracy_pct,
            nonzeros: r.nonzero_params,
            size_mb: r.size_bytes as f64 / MB,
            compr_x: r.compression_x,
            lat_ms_mean: r.latency.mean_ms,
            lat_ms_std: r.latency.std_ms,
            speedup_x: r.speedup_x,
            rel_bops_pct: r.rel_bops_pct,
            threads: r.latency.threads,
        }
    }
}

impl Objectives for ReportRow {
    fn objectives(&self) -> (f64, f64, f64) {
        (self.acc_pct, self.size_mb, self.lat_ms_mean)
    }
}

/// Latencies measured under different pool sizes are not comparable.
pub fn check_thread_counts(rows: &[ReportRow]) -> Result<()> {
    if let Some(first) = rows.first() {
        if let Some(other) = rows.iter().find(|r| r.threads != first.threads) {
            return Err(Error::config(format!(
                "refusing to merge records measured with {} and {} threads",
                first.threads, other.threads
            )));
        }
    }
    Ok(())
}

pub fn csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::config(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let f = |v: f64| format!("{v:.2}");
        w.write_record([
            r.method.clone(),
            f(r.acc_pct),
            r.nonzeros.to_string(),
            f(r.size_mb),
            f(r.compr_x),
            f(r.lat_ms_mean),
            f(r.lat_ms_std),
            f(r.speedup_x),
            f(r.rel_bops_pct),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn json_string(rows: &[ReportRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::config(format!("json: {e}")))
}

/// Parses a table written by [`csv_string`]; every row gets `threads`.
pub fn parse_csv(text: &str, threads: usize) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd
        .headers()
        .map_err(|e| Error::config(format!("csv: {e}")))?
        .clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::config(format!("unexpected csv header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(format!("csv row {}: {e}", i + 1)))?;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse().map_err(|_| {
                Error::config(format!(
                    "csv row {}: bad {} {:?}",
                    i + 1,
                    CSV_COLUMNS[c],
                    &rec[c]
                ))
            })
        };
        rows.push(ReportRow {
            method: rec[0].to_string(),
            acc_pct: num(1)?,
            nonzeros: rec[2].parse().map_err(|_| {
                Error::config(format!("csv row {}: bad nonzeros {:?}", i + 1, &rec[2]))
            })?,
            size_mb: num(3)?,
            compr_x: num(4)?,
            lat_ms_mean: num(5)?,
            lat_ms_std: num(6)?,
            speedup_x: num(7)?,
            rel_bops_pct: num(8)?,
            threads,
        });
    }
    Ok(rows)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the table after checking that all rows share a thread count.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: &Path) -> Result<()> {
    check_thread_counts(rows)?;
    let text = match format {
        ReportFormat::Csv => csv_string(rows)?,
        ReportFormat::Json => json_string(rows)?,
    };
    write_file(path, &text)
}

pub fn emit_records(records: &[TradeoffRecord], format: ReportFormat, path: &Path) -> Result<()> {
    let rows: Vec<ReportRow> = records.iter().map(ReportRow::from).collect();
    emit_report(&rows, format, path)
}

/// Whitespace-separated `x y` lines under a `#` header.
pub fn write_curve_file(path: &Path, columns: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "# {} {}", columns[0], columns[1]).map_err(io)?;
    for (x, y) in points {
        writeln!(w, "{x} {y}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `size_mb lat_ms acc_pct method` per row, for frontier plots.
pub fn write_frontier_file(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut text = String::from("# size_mb lat_ms_mean acc_pct method\n");
    for r in rows {
        text.push_str(&format!(
            "{} {} {} {}\n",
            r.size_mb, r.lat_ms_mean, r.acc_pct, r.method
        ));
    }
    write_file(path, &text)
}
