//! Experiment configuration files (TOML) and their validation.

use std::path::{Path, PathBuf};

use dum_core::data::ToySpec;
use dum_core::encoder::EncoderConfig;
use dum_core::eval::ScoreKind;
use dum_core::model::HeadConfig;
use dum_core::trainer::TrainPlan;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "DUM_LAB_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Results directory; relative paths resolve against the working
    /// directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainPlan,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Two Gaussian classes sharing y, probed on a lattice.
    Toy {
        #[serde(default)]
        toy: ToySpec,
        /// Lattice points farther than this from every center are the OOD
        /// probes.
        #[serde(default = "default_far_radius")]
        far_radius: f64,
    },
    /// MNIST-family IDX directory as the in-distribution set.
    Idx {
        /// Directory holding the four IDX files; relative paths resolve
        /// against `$DUM_LAB_DATA_DIR`, else the config's directory.
        root: PathBuf,
        #[serde(default = "default_classes")]
        num_classes: usize,
        /// 3 replicates the gray channel so CMNIST sets fit the encoder.
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        shifts: Vec<ShiftConfig>,
    },
}

fn default_far_radius() -> f64 {
    3.0
}
fn default_classes() -> usize {
    10
}
fn default_channels() -> usize {
    1
}

/// A shifted evaluation set built from the ID test split or another IDX
/// directory's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub transforms: Vec<Transform>,
    /// Labels are meaningful, so accuracy and Brier are reported too (OOD
    /// generalization); otherwise only detection AUROC.
    #[serde(default)]
    pub labeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Cmnist,
    Oodom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Brier,
    Auroc,
    CollapseRatio,
    PosteriorEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_scores")]
    pub scores: Vec<ScoreKind>,
    /// Export the head's uncertainty field on the toy lattice.
    #[serde(default)]
    pub grid: bool,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Accuracy, Metric::Brier, Metric::Auroc]
}
fn default_scores() -> Vec<ScoreKind> {
    ScoreKind::ALL.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metrics: default_metrics(), scores: default_scores(), grid: false }
    }
}

/// A sweep stored with the config; `sweep --axis` on the command line
/// overrides it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub values: Vec<toml::Value>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| CliError::Schema { path: String::new(), message: e.to_string() })?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Schema { path: e.path().to_string(), message: e.inner().to_string() })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Schema { path: String::new(), message: e.to_string() })
    }

    /// Reads, parses and validates `path`; relative dataset roots resolve
    /// against the data directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate(&data_dir(path.parent()))?;
        Ok(cfg)
    }

    /// Schema-level checks that serde cannot express, plus existence of the
    /// referenced dataset files.
    pub fn validate(&self, data_dir: &Path) -> CliResult<()> {
        let bad = |path: &str, message: String| Err(CliError::Schema { path: path.into(), message });
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if !csv_safe(&self.name) {
            return bad("name", "must be non-empty without commas or line breaks".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        if self.eval.metrics.is_empty() {
            return bad("eval.metrics", "at least one metric is required".into());
        }
        match &self.dataset {
            DatasetConfig::Toy { toy, far_radius } => {
                if let Err(e) = toy.validate() {
                    return bad("dataset.toy", e.to_string());
                }
                if toy.centers.len() != 2 && self.eval.metrics.contains(&Metric::CollapseRatio) {
                    return bad("eval.metrics", "collapse_ratio needs exactly two toy centers".into());
                }
                if !(*far_radius >= 0.0) {
                    return bad("dataset.far_radius", "must be non-negative".into());
                }
            }
            DatasetConfig::Idx { root, channels, label_noise, shifts, num_classes, .. } => {
                if *num_classes < 2 {
                    return bad("dataset.num_classes", "need at least two classes".into());
                }
                if *channels != 1 && *channels != 3 {
                    return bad("dataset.channels", format!("must be 1 or 3, got {channels}"));
                }
                if !(0.0..=1.0).contains(label_noise) {
                    return bad("dataset.label_noise", format!("{label_noise} outside [0, 1]"));
                }
                check_idx_dir(&resolve(data_dir, root), "dataset.root", true)?;
                for (i, s) in shifts.iter().enumerate() {
                    if !csv_safe(&s.name) {
                        return bad(
                            &format!("dataset.shifts[{i}].name"),
                            "must be non-empty without commas or line breaks".into(),
                        );
                    }
                    if let Some(r) = &s.root {
                        check_idx_dir(&resolve(data_dir, r), &format!("dataset.shifts[{i}].root"), false)?;
                    }
                    if s.transforms.contains(&Transform::Cmnist) && *channels != 3 {
                        return bad(
                            &format!("dataset.shifts[{i}].transforms"),
                            "cmnist needs dataset.channels = 3".into(),
                        );
                    }
                }
                if self.eval.metrics.contains(&Metric::CollapseRatio) {
                    return bad("eval.metrics", "collapse_ratio is defined on the toy dataset only".into());
                }
            }
        }
        if self.eval.grid && !matches!(self.dataset, DatasetConfig::Toy { .. }) {
            return bad("eval.grid", "grid export needs the 2D toy dataset".into());
        }
        if matches!(self.dataset, DatasetConfig::Toy { .. })
            && self.encoder.input_dim != 0
            && self.encoder.input_dim != 2
        {
            return bad("encoder.input_dim", "toy inputs are 2D".into());
        }
        Ok(())
    }
}

fn csv_safe(s: &str) -> bool {
    !s.is_empty() && !s.contains([',', '\n', '\r'])
}

/// `$DUM_LAB_DATA_DIR` if set, else `fallback`, else the working directory.
pub fn data_dir(fallback: Option<&Path>) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => fallback.map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    }
}

pub fn resolve(data_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_dir.join(p)
    }
}

fn check_idx_dir(dir: &Path, field: &str, need_train: bool) -> CliResult<()> {
    let mut needed = vec![TEST_IMAGES, TEST_LABELS];
    if need_train {
        needed.extend([TRAIN_IMAGES, TRAIN_LABELS]);
    }
    for f in needed {
        if !dir.join(f).is_file() {
            return Err(CliError::Schema { path: field.into(), message: format!("missing {}", dir.join(f).display()) });
        }
    }
    Ok(())
}
