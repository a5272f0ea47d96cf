//! Results directories: per-seed long-format CSVs and the aggregate
//! summary computed from them.

use std::fs;
use std::path::{Path, PathBuf};

use dum_core::eval::{self, MetricReport, SeedReport};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CSV_HEADER: &str = "method,setting,seed,metric,dataset,value";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn seed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Creates `dir`, refusing to touch an existing non-empty directory unless
/// `force` is set (in which case it is emptied first).
pub fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// One CSV row per metric value. Floats are written in shortest round-trip
/// form so reading them back is exact.
pub fn write_seed_csv(path: &Path, method: &str, setting: &str, report: &SeedReport) -> CliResult<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for v in &report.values {
        out.push_str(&format!("{method},{setting},{},{},{},{:?}\n", report.seed, v.metric, v.dataset, v.value));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

pub fn read_seed_csv(path: &Path) -> CliResult<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(malformed(path, 1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(malformed(path, i + 2, "expected 6 fields"));
        }
        rows.push(Row {
            method: f[0].into(),
            setting: f[1].into(),
            seed: f[2].parse().map_err(|_| malformed(path, i + 2, "bad seed"))?,
            metric: f[3].into(),
            dataset: f[4].into(),
            value: f[5].parse().map_err(|_| malformed(path, i + 2, "bad value"))?,
        });
    }
    Ok(rows)
}

fn malformed(path: &Path, line: usize, what: &str) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {what}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub name: String,
    pub method: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Aggregates the per-seed CSVs found in `dir` for `seeds`; the summary is
/// a pure function of those files.
pub fn summarize(dir: &Path, name: &str, method: &str, seeds: &[u64]) -> CliResult<SummaryFile> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let rows = read_seed_csv(&dir.join(seed_csv_name(s)))?;
        let mut r = SeedReport::new(s);
        for row in rows {
            r.push(row.metric, row.dataset, row.value);
        }
        reports.push(r);
    }
    Ok(SummaryFile { name: name.into(), method: method.into(), report: eval::aggregate(&reports)? })
}

pub fn write_summary(dir: &Path, summary: &SummaryFile) -> CliResult<PathBuf> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).map_err(|e| CliError::Core(e.into()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}
