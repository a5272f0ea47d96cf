//! Encoder + uncertainty head, with the auxiliary classifier used for
//! cross-entropy pretraining.

use numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{Constraint, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{Grid, UncertaintyScores};
use crate::flows::TOY_FLOW_LAYERS;
use crate::gp::{GpHead, KernelConfig, KernelFamily, EVAL_SAMPLES, TOY_INDUCING, TRAIN_SAMPLES};
use crate::natpn::{BudgetConfig, NatPnHead, PriorConfig};
use crate::nn::{Binding, Linear, Parameterized};
use crate::rng;

pub const DUE_LIPSCHITZ: f64 = 4.0;
pub const NATPN_LIPSCHITZ: f64 = 5.0;
pub const DEFAULT_ENTROPY_LAMBDA: f64 = 1e-5;
/// Rows per forward pass when scoring large sets.
pub const EVAL_BATCH: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    Natpn {
        /// Defaults to the number of classes.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_prior: Option<f64>,
        /// Defaults to uniform.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chi_prior: Option<Vec<f64>>,
        #[serde(default = "default_lambda")]
        entropy_lambda: f64,
        #[serde(default)]
        budget: BudgetConfig,
        #[serde(default = "default_flow_layers")]
        flow_layers: usize,
    },
    Due {
        kernel: KernelConfig,
        #[serde(default = "default_inducing")]
        num_inducing: usize,
        #[serde(default = "default_train_samples")]
        train_samples: usize,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
    },
}

fn default_lambda() -> f64 {
    DEFAULT_ENTROPY_LAMBDA
}
fn default_flow_layers() -> usize {
    TOY_FLOW_LAYERS
}
fn default_inducing() -> usize {
    TOY_INDUCING
}
fn default_train_samples() -> usize {
    TRAIN_SAMPLES
}
fn default_eval_samples() -> usize {
    EVAL_SAMPLES
}

impl HeadConfig {
    pub fn natpn() -> Self {
        HeadConfig::Natpn {
            n_prior: None,
            chi_prior: None,
            entropy_lambda: DEFAULT_ENTROPY_LAMBDA,
            budget: BudgetConfig::default(),
            flow_layers: TOY_FLOW_LAYERS,
        }
    }

    pub fn due(family: KernelFamily) -> Self {
        HeadConfig::Due {
            kernel: KernelConfig::new(family),
            num_inducing: TOY_INDUCING,
            train_samples: TRAIN_SAMPLES,
            eval_samples: EVAL_SAMPLES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadConfig::Natpn { .. } => "natpn",
            HeadConfig::Due { .. } => "due",
        }
    }

    pub fn default_lipschitz(&self) -> f64 {
        match self {
            HeadConfig::Natpn { .. } => NATPN_LIPSCHITZ,
            HeadConfig::Due { .. } => DUE_LIPSCHITZ,
        }
    }

    pub fn prior(&self, num_classes: usize) -> Option<PriorConfig> {
        match self {
            HeadConfig::Natpn { n_prior, chi_prior, entropy_lambda, .. } => {
                let mut p = PriorConfig::uniform(num_classes, *entropy_lambda);
                if let Some(n) = n_prior {
                    p.n_prior = *n;
                }
                if let Some(c) = chi_prior {
                    p.chi_prior = c.clone();
                }
                Some(p)
            }
            HeadConfig::Due { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    NatPn(NatPnHead),
    Gp { head: GpHead, train_samples: usize, eval_samples: usize },
}

impl Head {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Head::NatPn(h) => h.params(),
            Head::Gp { head, .. } => head.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::NatPn(h) => h.params_mut(),
            Head::Gp { head, .. } => head.params_mut(),
        }
    }

    pub fn scores(&self, z: &Tensor) -> Result<UncertaintyScores> {
        match self {
            Head::NatPn(h) => h.predict(z),
            Head::Gp { head, .. } => head.scores(z),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::NatPn(_) => "natpn",
            Head::Gp { .. } => "due",
        }
    }
}

impl Parameterized for Head {
    fn params(&self) -> Vec<&Tensor> {
        Head::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Head::params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub num_classes: usize,
    pub encoder: Encoder,
    pub head: Head,
    /// Linear classifier on the latent used only for pretraining.
    pub aux: Linear,
}

impl Model {
    /// Builds encoder and head; an unset Lipschitz constant takes the head's
    /// default.
    pub fn new(mut enc: EncoderConfig, head: &HeadConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if enc.constraint == Constraint::Bilipschitz && enc.lipschitz_c.is_none() {
            enc.lipschitz_c = Some(head.default_lipschitz());
        }
        let h = enc.latent_dim;
        let encoder = Encoder::new(enc, seed)?;
        let mut r = rng::stream(seed, "head");
        let head = match head {
            HeadConfig::Natpn { budget, flow_layers, .. } => {
                let prior = head.prior(num_classes).expect("natpn prior");
                Head::NatPn(NatPnHead::new(h, num_classes, *flow_layers, prior, *budget, &mut r)?)
            }
            HeadConfig::Due { kernel, num_inducing, train_samples, eval_samples } => {
                if *train_samples == 0 || *eval_samples == 0 {
                    return Err(Error::Config("GP sample counts must be positive".into()));
                }
                Head::Gp {
                    head: GpHead::new(h, num_classes, *num_inducing, kernel, &mut r)?,
                    train_samples: *train_samples,
                    eval_samples: *eval_samples,
                }
            }
        };
        let aux = Linear::new(h, num_classes, &mut rng::stream(seed, "aux"));
        Ok(Self { num_classes, encoder, head, aux })
    }

    /// Eval-mode latent codes, in row chunks.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_BATCH.max(1)) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            parts.push(self.encoder.embed(&x.select_rows(&idx))?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.encoder.config.latent_dim]));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::vstack(&refs)?)
    }

    pub fn scores_from_latent(&self, z: &Tensor) -> Result<UncertaintyScores> {
        let n = z.shape()[0];
        let mut out: Option<UncertaintyScores> = None;
        for start in (0..n).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let s = self.head.scores(&z.select_rows(&idx))?;
            out = Some(match out {
                None => s,
                Some(acc) => concat_scores(acc, s)?,
            });
        }
        out.ok_or_else(|| Error::Shape("no inputs to score".into()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<UncertaintyScores> {
        self.scores_from_latent(&self.embed(x)?)
    }

    /// Flow log-density (evidential head) or predictive entropy (GP head)
    /// at every point of the input lattice.
    pub fn uncertainty_grid(&self, extent: [f64; 2], resolution: usize) -> Result<Grid> {
        let lattice = crate::data::lattice(extent, resolution);
        let z = self.embed(&lattice)?;
        let values = match &self.head {
            Head::NatPn(h) => h.flow.log_prob(&z)?,
            Head::Gp { head, .. } => head.scores(&z)?.predictive,
        };
        Ok(Grid { extent, resolution, values })
    }

    /// Mean Dirichlet entropy of the evidential posterior over `x`.
    pub fn mean_posterior_entropy(&self, x: &Tensor) -> Result<Option<f64>> {
        let Head::NatPn(h) = &self.head else { return Ok(None) };
        let z = self.embed(x)?;
        let (post, _) = h.posterior(&z)?;
        let g = Graph::new();
        let ent = crate::natpn::dirichlet_entropy(g.constant(post.alpha))?;
        Ok(Some(ent.value().data().iter().sum::<f64>() / z.shape()[0] as f64))
    }
}

fn concat_scores(a: UncertaintyScores, b: UncertaintyScores) -> Result<UncertaintyScores> {
    let join = |x: Option<Vec<f64>>, y: Option<Vec<f64>>| match (x, y) {
        (Some(mut x), Some(y)) => {
            x.extend(y);
            Some(x)
        }
        _ => None,
    };
    let mut label = a.predicted_label;
    label.extend(b.predicted_label);
    let mut pred = a.predictive;
    pred.extend(b.predictive);
    Ok(UncertaintyScores {
        predicted_label: label,
        aleatoric: join(a.aleatoric, b.aleatoric),
        epistemic: join(a.epistemic, b.epistemic),
        predictive: pred,
        probs: Tensor::vstack(&[&a.probs, &b.probs])?,
    })
}

/// Mean cross-entropy of the auxiliary classifier.
pub fn cross_entropy<'g>(z: Var<'g>, b: &mut Binding<'_, 'g>, labels: &[usize]) -> Result<Var<'g>> {
    let logits = Linear::forward(z, b)?;
    Ok(logits.log_softmax(1)?.pick(labels)?.mean()?.neg()?)
}
