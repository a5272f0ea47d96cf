//! Canonical experiment configs, one per study, at desk scale.

use std::path::{Path, PathBuf};

use dum_core::data::ToySpec;
use dum_core::encoder::{Constraint, EncoderConfig};
use dum_core::flows::DEFAULT_FLOW_LAYERS;
use dum_core::gp::{KernelFamily, MNIST_INDUCING};
use dum_core::model::HeadConfig;
use dum_core::natpn::BudgetConfig;
use dum_core::optim::Schedule;
use dum_core::trainer::{Phase, PhaseName, Scheme, Stabilizer, TrainPlan, MNIST_BATCH};
use toml::Value;

use crate::config::{
    DatasetConfig, EvalConfig, ExperimentConfig, Metric, ShiftConfig, SweepConfig, Transform, SCHEMA_VERSION,
};
use crate::error::{CliError, CliResult};

pub const TOY_LATENT: usize = 128;
pub const TOY_EPOCHS: usize = 100;
pub const TOY_BATCH: usize = 64;
pub const TOY_ENCODER_LR: f64 = 1e-3;
pub const TOY_HEAD_LR: f64 = 5e-3;
pub const MNIST_LATENT: usize = 16;
pub const MNIST_TRAIN_LIMIT: usize = 20_000;

fn seeds() -> Vec<u64> {
    (0..5).collect()
}

fn toy_plan() -> TrainPlan {
    TrainPlan {
        phases: vec![Phase::new(PhaseName::Main, TOY_EPOCHS, TOY_ENCODER_LR, TOY_HEAD_LR)],
        seed: 0,
        batch_size: TOY_BATCH,
        clip_grad: false,
        shared_optimizer: false,
    }
}

fn toy(name: &str, head: HeadConfig) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        seeds: seeds(),
        output_dir: PathBuf::from("results").join(name),
        dataset: DatasetConfig::Toy { toy: ToySpec::default(), far_radius: 3.0 },
        encoder: EncoderConfig::new(0, TOY_LATENT),
        head,
        train: toy_plan(),
        eval: EvalConfig {
            metrics: vec![Metric::Accuracy, Metric::Brier, Metric::Auroc, Metric::CollapseRatio],
            grid: true,
            ..EvalConfig::default()
        },
        sweep: None,
    }
}

fn sweep(axis: &str, values: Vec<Value>) -> Option<SweepConfig> {
    Some(SweepConfig { axis: axis.into(), values })
}

fn strings(v: &[&str]) -> Vec<Value> {
    v.iter().map(|s| Value::String((*s).into())).collect()
}

fn floats(v: &[f64]) -> Vec<Value> {
    v.iter().map(|&x| Value::Float(x)).collect()
}

fn mnist_head() -> HeadConfig {
    HeadConfig::Natpn {
        n_prior: None,
        chi_prior: None,
        entropy_lambda: dum_core::model::DEFAULT_ENTROPY_LAMBDA,
        budget: BudgetConfig::default(),
        flow_layers: DEFAULT_FLOW_LAYERS,
    }
}

/// Pretrain with cross-entropy, then the main phase, then a head-only
/// finetune with the multistep schedule.
pub fn mnist_plan(scheme: Scheme, stabilizers: Vec<Stabilizer>) -> TrainPlan {
    let pretrain = Phase::new(PhaseName::Pretrain, 5, 1e-3, 0.0);
    let mut main = Phase::new(PhaseName::Main, 5, 1e-4, 1e-3);
    main.scheme = Some(scheme);
    main.stabilizers = stabilizers;
    main.encoder_schedule = Schedule::Cosine { eta_min: 1e-5 };
    let mut finetune = Phase::new(PhaseName::Finetune, 2, 0.0, 1e-3);
    finetune.head_schedule = Schedule::finetune();
    TrainPlan {
        phases: vec![pretrain, main, finetune],
        seed: 0,
        batch_size: MNIST_BATCH,
        clip_grad: true,
        shared_optimizer: false,
    }
}

pub fn mnist(name: &str, scheme: Scheme, stabilizers: Vec<Stabilizer>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        seeds: seeds(),
        output_dir: PathBuf::from("results").join(name),
        dataset: DatasetConfig::Idx {
            root: "mnist".into(),
            num_classes: 10,
            channels: 1,
            train_limit: Some(MNIST_TRAIN_LIMIT),
            test_limit: None,
            label_noise: 0.0,
            shifts: vec![
                ShiftConfig { name: "kmnist".into(), root: Some("kmnist".into()), transforms: vec![], labeled: false },
                ShiftConfig {
                    name: "kmnist_oodom".into(),
                    root: Some("kmnist".into()),
                    transforms: vec![Transform::Oodom],
                    labeled: false,
                },
            ],
        },
        encoder: EncoderConfig::new(0, MNIST_LATENT),
        head: mnist_head(),
        train: mnist_plan(scheme, stabilizers),
        eval: EvalConfig {
            metrics: vec![Metric::Accuracy, Metric::Brier, Metric::Auroc, Metric::PosteriorEntropy],
            ..EvalConfig::default()
        },
        sweep: None,
    }
}

/// Every recipe, in a fixed order.
pub fn all() -> Vec<ExperimentConfig> {
    let mut out = Vec::new();

    let mut c = toy("toy_collapse_natpn", HeadConfig::natpn());
    c.sweep = sweep("encoder.constraint", strings(&["none", "residual", "bilipschitz"]));
    out.push(c);

    let mut c = toy("toy_collapse_due", HeadConfig::due(KernelFamily::Rbf));
    c.sweep = sweep("encoder.constraint", strings(&["none", "residual", "bilipschitz"]));
    out.push(c);

    let mut c = toy("toy_reconstruction", HeadConfig::natpn());
    c.sweep = sweep("encoder.recon_lambda", floats(&[0.0, 0.1, 1.0]));
    out.push(c);

    for scheme in [Scheme::Joint, Scheme::Sequential] {
        for (tag, stab) in
            [("bn", vec![Stabilizer::FinalBatchnorm]), ("reset", vec![Stabilizer::ResetLastLayer]), ("none", vec![])]
        {
            let s = match scheme {
                Scheme::Joint => "joint",
                Scheme::Sequential => "sequential",
            };
            out.push(mnist(&format!("mnist_{s}_{tag}"), scheme, stab));
        }
    }

    // main phase is phases[1] in the MNIST plan
    let mut c = mnist("mnist_decoupled_lr_grid", Scheme::Joint, vec![Stabilizer::FinalBatchnorm]);
    c.sweep = sweep("train.phases[1].head_lr", floats(&[1e-4, 1e-3, 1e-2]));
    out.push(c);

    let mut c = mnist("mnist_prior_lambda", Scheme::Joint, vec![Stabilizer::FinalBatchnorm]);
    c.sweep = sweep("head.entropy_lambda", floats(&[0.0, 1e-5, 1e-3, 0.1]));
    out.push(c);

    let mut c = mnist("mnist_prior_evidence", Scheme::Joint, vec![Stabilizer::FinalBatchnorm]);
    c.sweep = sweep("head.n_prior", floats(&[10.0, 100.0, 1000.0]));
    out.push(c);

    let mut c = mnist("mnist_kernels", Scheme::Joint, vec![Stabilizer::FinalBatchnorm]);
    c.head = HeadConfig::Due {
        kernel: dum_core::gp::KernelConfig::new(KernelFamily::Rbf),
        num_inducing: MNIST_INDUCING,
        train_samples: dum_core::gp::TRAIN_SAMPLES,
        eval_samples: dum_core::gp::EVAL_SAMPLES,
    };
    c.encoder.constraint = Constraint::Bilipschitz;
    c.eval.metrics.retain(|m| *m != Metric::PosteriorEntropy);
    c.sweep = sweep("head.kernel.family", strings(&["rbf", "rq", "matern12", "matern32", "matern52"]));
    out.push(c);

    out
}

/// Writes every recipe as `<name>.toml` under `dir`.
pub fn emit(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let fail = |source| CliError::Io { path: dir.to_path_buf(), source };
    std::fs::create_dir_all(dir).map_err(fail)?;
    let mut written = Vec::new();
    for r in all() {
        let path = dir.join(format!("{}.toml", r.name));
        std::fs::write(&path, r.to_toml()?).map_err(|source| CliError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}
