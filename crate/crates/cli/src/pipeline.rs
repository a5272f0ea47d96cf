//! One seed of an experiment: build datasets, train, evaluate.

use std::path::Path;

use dum_core::data::{self, Dataset, Role, Standardizer};
use dum_core::eval::{self, Grid, SeedReport, UncertaintyScores};
use dum_core::model::Model;
use dum_core::trainer::{self, TrainLog};
use numcore::Tensor;

use crate::config::{self, DatasetConfig, ExperimentConfig, Metric, ShiftConfig, Transform};
use crate::error::CliResult;

/// Offset between the training seed and the seed of the toy test draw.
pub const TOY_TEST_SEED_OFFSET: u64 = 1_000_003;

/// An evaluation set beyond the ID test split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub inputs: Tensor,
    /// Present for OOD-generalization sets.
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shifts: Vec<EvalSet>,
    /// Toy lattice, when the dataset is the toy.
    pub grid: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub report: SeedReport,
    pub log: TrainLog,
    pub grid: Option<Grid>,
    pub model: Model,
}

pub fn prepare(cfg: &ExperimentConfig, data_dir: &Path, seed: u64) -> CliResult<Prepared> {
    match &cfg.dataset {
        DatasetConfig::Toy { toy, far_radius } => {
            let (train, grid) = data::make_collapse_toy(toy, seed)?;
            let (test, _) = data::make_collapse_toy(toy, seed.wrapping_add(TOY_TEST_SEED_OFFSET))?;
            let far = data::far_probes(&grid, &toy.centers, *far_radius);
            let shifts = vec![EvalSet { name: "far_grid".into(), inputs: grid.select_rows(&far), labels: None }];
            Ok(Prepared {
                train: train.with_name("toy_train"),
                test: test.with_role(Role::Test).with_name("toy_test"),
                shifts,
                grid: Some(grid),
            })
        }
        DatasetConfig::Idx { root, num_classes, channels, train_limit, test_limit, label_noise, shifts } => {
            let dir = config::resolve(data_dir, root);
            let pool = limit(
                data::read_idx(&dir.join(config::TRAIN_IMAGES), &dir.join(config::TRAIN_LABELS), Some(*num_classes))?,
                *train_limit,
            );
            let (train, _val) = data::split(&pool, seed)?;
            let train = if *label_noise > 0.0 { data::inject_label_noise(&train, *label_noise, seed)? } else { train };
            let test_raw = limit(
                data::read_idx(&dir.join(config::TEST_IMAGES), &dir.join(config::TEST_LABELS), Some(*num_classes))?,
                *test_limit,
            )
            .with_role(Role::Test);
            let std = Standardizer::fit(&train);
            let widen = |d: Dataset| -> CliResult<Dataset> {
                Ok(if *channels == 3 { data::replicate_channels(&d)? } else { d })
            };
            let mut sets = Vec::with_capacity(shifts.len());
            for s in shifts {
                let base = match &s.root {
                    None => test_raw.clone(),
                    Some(r) => {
                        let d = config::resolve(data_dir, r);
                        limit(
                            data::read_idx(
                                &d.join(config::TEST_IMAGES),
                                &d.join(config::TEST_LABELS),
                                Some(*num_classes),
                            )?,
                            *test_limit,
                        )
                    }
                };
                sets.push(shift_set(s, base, &std, *channels, seed)?);
            }
            Ok(Prepared {
                train: widen(std.apply(&train))?.with_name("id_train"),
                test: widen(std.apply(&test_raw))?.with_name("id_test"),
                shifts: sets,
                grid: None,
            })
        }
    }
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
        _ => d,
    }
}

/// CMNIST zeroes a channel of the raw image (before standardization);
/// OODom scales standardized inputs.
fn shift_set(s: &ShiftConfig, raw: Dataset, std: &Standardizer, channels: usize, seed: u64) -> CliResult<EvalSet> {
    let cmnist = s.transforms.contains(&Transform::Cmnist);
    let mut d = if cmnist { data::make_cmnist(&raw, seed)? } else { raw };
    d = std.apply(&d);
    if !cmnist && channels == 3 {
        d = data::replicate_channels(&d)?;
    }
    for t in &s.transforms {
        if *t == Transform::Oodom {
            d = data::make_oodom(&d);
        }
    }
    Ok(EvalSet { name: s.name.clone(), inputs: d.inputs, labels: s.labeled.then_some(d.labels) })
}

/// Trains a fresh model on `prep.train` and evaluates every configured
/// metric.
pub fn run_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> CliResult<SeedOutcome> {
    let mut enc = cfg.encoder.clone();
    if enc.input_dim == 0 {
        enc.input_dim = prep.train.dim();
    }
    let mut model = Model::new(enc, &cfg.head, prep.train.num_classes, seed)?;
    let mut plan = cfg.train.clone();
    plan.seed = seed;
    let log = trainer::run(&plan, &mut model, &prep.train)?;

    let mut report = SeedReport::new(seed);
    let test_scores = model.predict(&prep.test.inputs)?;
    let metrics = &cfg.eval.metrics;
    push_labeled(&mut report, metrics, &prep.test.name, &test_scores, &prep.test.labels)?;
    for set in &prep.shifts {
        let scores = model.predict(&set.inputs)?;
        if let Some(labels) = &set.labels {
            push_labeled(&mut report, metrics, &set.name, &scores, labels)?;
        }
        if metrics.contains(&Metric::Auroc) {
            for &kind in &cfg.eval.scores {
                if let (Some(id), Some(ood)) = (test_scores.get(kind), scores.get(kind)) {
                    report.push(format!("auroc_{}", kind.name()), set.name.clone(), eval::auroc(id, ood)?);
                }
            }
        }
    }
    if metrics.contains(&Metric::CollapseRatio) {
        if let (Some(grid), DatasetConfig::Toy { .. }) = (&prep.grid, &cfg.dataset) {
            let zg = model.embed(grid)?;
            let zt = model.embed(&prep.train.inputs)?;
            report.push("collapse_ratio", "grid", eval::collapse_ratio(&zg, &zt, &prep.train.labels)?);
        }
    }
    if metrics.contains(&Metric::PosteriorEntropy) {
        if let Some(h) = model.mean_posterior_entropy(&prep.test.inputs)? {
            report.push("posterior_entropy", prep.test.name.clone(), h);
        }
    }
    let grid = match (&cfg.dataset, cfg.eval.grid) {
        (DatasetConfig::Toy { toy, .. }, true) => Some(model.uncertainty_grid(toy.grid_extent, toy.grid_resolution)?),
        _ => None,
    };
    Ok(SeedOutcome { report, log, grid, model })
}

fn push_labeled(
    report: &mut SeedReport,
    metrics: &[Metric],
    name: &str,
    scores: &UncertaintyScores,
    labels: &[usize],
) -> CliResult<()> {
    if metrics.contains(&Metric::Accuracy) {
        report.push("accuracy", name, eval::accuracy(&scores.predicted_label, labels)?);
    }
    if metrics.contains(&Metric::Brier) {
        report.push("brier", name, eval::brier(&scores.probs, labels)?);
    }
    Ok(())
}
