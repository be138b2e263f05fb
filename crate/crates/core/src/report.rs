//! Line-delimited JSON run reports and plain-text summary tables.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One report line. Epoch `0` is the state before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub top1_hard: f64,
    pub top1_soft: f64,
    pub backend: String,
    pub k: usize,
    pub d: usize,
    pub tau: f64,
    pub cluster_iters: usize,
    pub residual: f64,
    pub retained_iterates: usize,
    pub t_forward_s: f64,
    pub t_backward_s: f64,
}

/// Appends JSON lines to a report file.
pub struct ReportWriter {
    out: BufWriter<File>,
}

impl ReportWriter {
    /// Opens `path` for appending and writes a `{"config": ...}` echo line.
    pub fn open(path: impl AsRef<Path>, config: &serde_json::Value) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = Self { out: BufWriter::new(file) };
        w.write_value(&serde_json::json!({ "config": config }))?;
        Ok(w)
    }

    pub fn write_value<S: Serialize>(&mut self, value: &S) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::param(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn record(&mut self, r: &ReportRecord) -> Result<()> {
        self.write_value(r)
    }
}

/// Parses the records of a report, skipping config echo lines.
pub fn read_records(text: &str) -> Result<Vec<ReportRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("{\"config\"") {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::format(n as u64, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Fixed-width text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let fmt_row = |cells: &mut dyn Iterator<Item = &str>| {
        cells
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = fmt_row(&mut header.iter().copied());
    s.push('\n');
    s.push_str(&"-".repeat(s.len() - 1));
    s.push('\n');
    for row in rows {
        s.push_str(&fmt_row(&mut row.iter().map(String::as_str)));
        s.push('\n');
    }
    s
}

/// Accuracy table: one row per final record.
pub fn accuracy_table(records: &[ReportRecord]) -> String {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.d.to_string(),
                r.backend.clone(),
                format!("{:.4}", r.top1_hard),
                format!("{:.4}", r.top1_soft),
            ]
        })
        .collect();
    text_table(&["k", "d", "backend", "top1_hard", "top1_soft"], &rows)
}
