//! First-order optimizers with decoupled weight decay, and learning-rate
//! schedules evaluated at a 0-based step index.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    Cosine {
        eta_min: f64,
    },
    /// Multiply by `factor` at each milestone, given as fractions of the
    /// phase's total steps.
    Multistep {
        #[serde(default = "default_milestones")]
        milestones: Vec<f64>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
    LinearWarmup,
}

fn default_milestones() -> Vec<f64> {
    vec![0.7, 0.9]
}
fn default_factor() -> f64 {
    0.2
}

impl Schedule {
    /// Finetune default: ×0.2 at 70% and 90%.
    pub fn finetune() -> Self {
        Schedule::Multistep { milestones: default_milestones(), factor: default_factor() }
    }
}

/// Learning rate at `step` of `total`.
pub fn schedule_lr(schedule: &Schedule, base: f64, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 0.0 } else { step.min(total) as f64 / total as f64 };
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine { eta_min } => eta_min + 0.5 * (base - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()),
        Schedule::Multistep { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| frac >= m).count();
            base * factor.powi(passed as i32)
        }
        Schedule::LinearWarmup => base * frac,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Momentum buffer (SGD) or first moment (AdamW), per parameter.
    first: Vec<Vec<f64>>,
    /// Second moment (AdamW only).
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second = if kind == OptimizerKind::Adamw { zeros.clone() } else { Vec::new() };
        Self { kind, first: zeros, second, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer over {} tensors got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first[i].len() {
                return Err(Error::Shape(format!("parameter {i}: {:?} with gradient {:?}", p.shape(), g.shape())));
            }
        }
        self.steps += 1;
        let decay = 1.0 - lr * weight_decay;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((x, &gi), v) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                        *v = SGD_MOMENTUM * *v + gi;
                        *x = *x * decay - lr * *v;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((x, &gi), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x = *x * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
