//! Run artifacts on disk and the tables rendered from them.
//!
//! A run directory holds `run.json` (a [`RunReport`]), `evals.jsonl` (one
//! [`EvalRecord`](crate::bo::EvalRecord) per line, in evaluation order) and
//! `final.fpn1` (the final network checkpoint).
//!
//! `evals.jsonl` lines look like
//! `{"round":1,"eval_idx":0,"x":{"layers":[{"a":..,"m":..}],"p0":..,"kappa":..},"eps":..,"s":..,"l":..,"wall_s":..,"failed":false}`;
//! non-finite numbers are written as `null`.
//!
//! Every number in a table is printed with the shortest representation that
//! parses back to the same `f64`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finepruner::{Mode, RunReport};

pub const RUN_FILE: &str = "run.json";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const CHECKPOINT_FILE: &str = "final.fpn1";

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join(RUN_FILE);
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// A titled block of rows; the first row is the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, header: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            rows: vec![header.iter().map(|h| h.to_string()).collect()],
        }
    }
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
        .replace(char::is_whitespace, "_")
}

/// Mode comparison (one row per run) followed by one per-layer breakdown per run.
pub fn build_tables(runs: &[(PathBuf, RunReport)]) -> Vec<Table> {
    let mut summary = Table::new(
        "runs",
        &[
            "run",
            "mode",
            "lambda",
            "val_accuracy",
            "test_accuracy",
            "parameters",
            "compression_rate",
        ],
    );
    for (dir, r) in runs {
        let compression = match r.mode {
            Mode::FinetuneOnly => "--".to_string(),
            _ => r.compression_rate.to_string(),
        };
        summary.rows.push(vec![
            run_label(dir),
            r.mode.name().to_string(),
            r.lambda.to_string(),
            r.val_accuracy.to_string(),
            r.test_accuracy.to_string(),
            r.parameters.to_string(),
            compression,
        ]);
    }
    let mut tables = vec![summary];
    for (dir, r) in runs {
        let mut t = Table::new(
            &format!("layers:{}", run_label(dir)),
            &["layer", "parameters_before", "parameters_after", "percent_pruned"],
        );
        let last = r.last();
        for layer in &last.layers {
            t.rows.push(vec![
                layer.name.clone(),
                layer.parameters_before().to_string(),
                layer.parameters_after().to_string(),
                (100.0 * layer.sparsity).to_string(),
            ]);
        }
        t.rows.push(vec![
            "total".to_string(),
            r.total_parameters.to_string(),
            r.parameters.to_string(),
            (100.0 * last.s).to_string(),
        ]);
        tables.push(t);
    }
    tables
}

/// Aligned plain-text rendering. Each line splits on whitespace into the
/// same cells as the corresponding CSV record.
pub fn render_text(tables: &[Table]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&t.title);
        out.push('\n');
        let cols = t.rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                t.rows
                    .iter()
                    .filter_map(|r| r.get(c))
                    .map(String::len)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        for row in &t.rows {
            let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
    }
    out
}

/// CSV rendering: the same lines as [`render_text`], blank separators included.
pub fn render_csv(tables: &[Table]) -> Result<String> {
    let mut out = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push(b'\n');
        }
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::parse("csv output", e.to_string());
        w.write_record([&t.title]).map_err(csv_err)?;
        for row in &t.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        out.extend(w.into_inner().map_err(|e| Error::parse("csv output", e.to_string()))?);
    }
    String::from_utf8(out).map_err(|e| Error::parse("csv output", e.to_string()))
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, RunReport)>> {
    dirs.iter().map(|d| Ok((d.clone(), load_report(d)?))).collect()
}

/// `round,compression_rate,val_error`, one row per outer round. With
/// `include_initial`, a round-0 row for the fine-tuned, unpruned network
/// comes first.
pub fn plotdata(report: &RunReport, include_initial: bool) -> String {
    let mut out = String::from("round,compression_rate,val_error\n");
    let rows = include_initial
        .then_some(&report.initial)
        .into_iter()
        .chain(&report.rounds);
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.round, r.compression_rate, r.eps_val));
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}
