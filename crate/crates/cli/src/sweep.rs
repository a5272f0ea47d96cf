//! `sweep`: one run per value of a single config leaf, plus a combined
//! long-format CSV keyed by (axis, value, seed).

use std::fs;
use std::path::PathBuf;

use toml::Value;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{run_experiment, RunOptions, RunOutcome};
use crate::results::{self, io_err};

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub runs: Vec<(String, RunOutcome)>,
    pub csv: PathBuf,
}

/// Parses a command-line value as a TOML scalar (`16`, `1e-5`, `true`),
/// falling back to a bare string (`rbf`).
pub fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

/// Text used in directory names and CSV keys.
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Sets the leaf at a dotted `path` (with `[i]` indices into arrays).
/// Intermediate tables and arrays must exist; the leaf may be new, in which
/// case schema validation decides whether the name is real.
pub fn set_path(root: &mut Value, path: &str, new: Value) -> CliResult<()> {
    let unknown = |why: &str| CliError::Schema { path: path.into(), message: format!("unknown sweep axis ({why})") };
    let mut steps = Vec::new();
    for part in path.split('.') {
        let (key, rest) = part.split_once('[').map_or((part, ""), |(k, r)| (k, r));
        if key.is_empty() {
            return Err(unknown("empty segment"));
        }
        steps.push(Step::Key(key.to_string()));
        for idx in rest.split('[').filter(|s| !s.is_empty()) {
            let i = idx.strip_suffix(']').and_then(|n| n.parse().ok()).ok_or_else(|| unknown("bad index"))?;
            steps.push(Step::Index(i));
        }
    }
    let (last, init) = steps.split_last().ok_or_else(|| unknown("empty path"))?;
    let mut cur = root;
    for s in init {
        cur = match (s, cur) {
            (Step::Key(k), Value::Table(t)) => t.get_mut(k).ok_or_else(|| unknown("no such table"))?,
            (Step::Index(i), Value::Array(a)) => a.get_mut(*i).ok_or_else(|| unknown("index out of range"))?,
            _ => return Err(unknown("path does not match the config shape")),
        };
    }
    match (last, cur) {
        (Step::Key(k), Value::Table(t)) => {
            t.insert(k.clone(), new);
        }
        (Step::Index(i), Value::Array(a)) if *i < a.len() => a[*i] = new,
        _ => return Err(unknown("path does not match the config shape")),
    }
    Ok(())
}

enum Step {
    Key(String),
    Index(usize),
}

/// A copy of `cfg` with `axis` set to `value`, re-validated through the
/// schema.
pub fn with_value(cfg: &ExperimentConfig, axis: &str, value: &Value) -> CliResult<ExperimentConfig> {
    let mut tree =
        Value::try_from(cfg).map_err(|e| CliError::Schema { path: String::new(), message: e.to_string() })?;
    set_path(&mut tree, axis, value.clone())?;
    let text = toml::to_string(&tree).map_err(|e| CliError::Schema { path: axis.into(), message: e.to_string() })?;
    ExperimentConfig::from_toml(&text)
}

pub fn run_sweep(cfg: &ExperimentConfig, axis: &str, values: &[Value], opts: &RunOptions) -> CliResult<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    // fail on a bad axis before any training starts
    let variants: Vec<(String, ExperimentConfig)> =
        values.iter().map(|v| Ok((value_label(v), with_value(cfg, axis, v)?))).collect::<CliResult<_>>()?;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    results::prepare_dir(&dir, opts.force)?;

    let mut runs = Vec::with_capacity(variants.len());
    let mut csv = String::from("axis,axis_value,");
    csv.push_str(results::CSV_HEADER);
    csv.push('\n');
    for (label, mut variant) in variants {
        variant.name = format!("{}[{axis}={label}]", cfg.name);
        let sub = RunOptions { out: Some(dir.join(format!("{axis}={label}"))), force: true, ..opts.clone() };
        let outcome = run_experiment(&variant, &sub)?;
        for &s in opts.seeds.as_deref().unwrap_or(&variant.seeds) {
            for row in results::read_seed_csv(&outcome.dir.join(results::seed_csv_name(s)))? {
                csv.push_str(&format!(
                    "{axis},{label},{},{},{},{},{},{:?}\n",
                    row.method, cfg.name, row.seed, row.metric, row.dataset, row.value
                ));
            }
        }
        runs.push((label, outcome));
    }
    let path = dir.join(SWEEP_FILE);
    fs::write(&path, csv).map_err(io_err(&path))?;
    Ok(SweepOutcome { dir, runs, csv: path })
}
