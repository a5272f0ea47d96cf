//! `run`: every seed of one config, then aggregation.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::{self, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline;
use crate::results::{self, io_err, SummaryFile};

pub const THREADS_ENV: &str = "DUM_LAB_THREADS";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output_dir`.
    pub out: Option<PathBuf>,
    /// Overrides `seeds`.
    pub seeds: Option<Vec<u64>>,
    pub force: bool,
    /// Where relative dataset roots resolve.
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: SummaryFile,
}

/// Worker count: `$DUM_LAB_THREADS` if set and positive, else the machine's
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunOutcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = &opts.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &opts.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate(&opts.data_dir)?;
    let dir = cfg.output_dir.clone();
    results::prepare_dir(&dir, opts.force)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(io_err(&cfg_path))?;

    let method = cfg.head.name().to_string();
    let queue = Mutex::new(cfg.seeds.clone().into_iter());
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = worker_count().min(cfg.seeds.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    return;
                }
                let Some(seed) = queue.lock().expect("lock").next() else { return };
                if let Err(e) = run_one(&cfg, &opts.data_dir, &dir, &method, seed) {
                    failure.lock().expect("lock").get_or_insert(e);
                    return;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let summary = results::summarize(&dir, &cfg.name, &method, &cfg.seeds)?;
    results::write_summary(&dir, &summary)?;
    Ok(RunOutcome { dir, summary })
}

fn run_one(cfg: &ExperimentConfig, data_dir: &Path, dir: &Path, method: &str, seed: u64) -> CliResult<()> {
    let prep = pipeline::prepare(cfg, data_dir, seed)?;
    let out = pipeline::run_seed(cfg, &prep, seed)?;
    out.log.write_csv(&dir.join(format!("train_log_seed_{seed}.csv")))?;
    if let Some(g) = &out.grid {
        g.write_csv(&dir.join(format!("grid_seed_{seed}.csv")))?;
    }
    // the seed CSV goes last: its presence marks a completed seed
    results::write_seed_csv(&dir.join(results::seed_csv_name(seed)), method, &cfg.name, &out.report)
}

/// Loads `path` and runs it with data resolved per [`config::data_dir`].
pub fn run_path(path: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>, force: bool) -> CliResult<RunOutcome> {
    let cfg = ExperimentConfig::load(path)?;
    let opts = RunOptions { out, seeds, force, data_dir: config::data_dir(path.parent()) };
    run_experiment(&cfg, &opts)
}
