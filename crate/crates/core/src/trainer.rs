//! Training phases: cross-entropy pretraining, head-only warmup, the joint or
//! sequential main phase, and head-only finetuning. Encoder and head always
//! have their own optimizer state.

use std::io::Write;
use std::path::Path;

use numcore::{Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{Constraint, Mode};
use crate::error::{Error, Result};
use crate::gp::init_inducing;
use crate::model::{cross_entropy, Head, Model};
use crate::natpn::bayesian_loss;
use crate::nn::{Bound, Parameterized};
use crate::optim::{schedule_lr, Optimizer, OptimizerKind, Schedule};
use crate::rng;

pub const MNIST_BATCH: usize = 512;
pub const CLIP_NORM: f64 = 10.0;
/// Embeddings used to place the GP inducing points.
pub const INDUCING_SAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseName {
    Pretrain,
    Warmup,
    Main,
    Finetune,
}

impl PhaseName {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseName::Pretrain => "pretrain",
            PhaseName::Warmup => "warmup",
            PhaseName::Main => "main",
            PhaseName::Finetune => "finetune",
        }
    }

    fn order(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Joint,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    EncoderHead,
    HeadOnly,
    EncoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilizer {
    FinalBatchnorm,
    ResetLastLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: PhaseName,
    pub epochs: usize,
    #[serde(default)]
    pub encoder_lr: f64,
    #[serde(default)]
    pub head_lr: f64,
    #[serde(default = "adamw")]
    pub encoder_optimizer: OptimizerKind,
    #[serde(default = "adamw")]
    pub head_optimizer: OptimizerKind,
    #[serde(default = "constant")]
    pub encoder_schedule: Schedule,
    #[serde(default = "constant")]
    pub head_schedule: Schedule,
    #[serde(default)]
    pub encoder_weight_decay: f64,
    #[serde(default)]
    pub head_weight_decay: f64,
    /// Main phase only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    /// Overrides the phase default (pretrain: encoder only; warmup and
    /// finetune: head only; main: by scheme).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Trainable>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stabilizers: Vec<Stabilizer>,
}

fn adamw() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn constant() -> Schedule {
    Schedule::Constant
}

impl Phase {
    pub fn new(name: PhaseName, epochs: usize, encoder_lr: f64, head_lr: f64) -> Self {
        Self {
            name,
            epochs,
            encoder_lr,
            head_lr,
            encoder_optimizer: OptimizerKind::Adamw,
            head_optimizer: OptimizerKind::Adamw,
            encoder_schedule: Schedule::Constant,
            head_schedule: Schedule::Constant,
            encoder_weight_decay: 0.0,
            head_weight_decay: 0.0,
            scheme: (name == PhaseName::Main).then_some(Scheme::Joint),
            trainable: None,
            stabilizers: Vec::new(),
        }
    }

    pub fn trainable(&self) -> Trainable {
        if let Some(t) = self.trainable {
            return t;
        }
        match self.name {
            PhaseName::Pretrain => Trainable::EncoderOnly,
            PhaseName::Warmup | PhaseName::Finetune => Trainable::HeadOnly,
            PhaseName::Main => match self.scheme.unwrap_or(Scheme::Joint) {
                Scheme::Joint => Trainable::EncoderHead,
                Scheme::Sequential => Trainable::HeadOnly,
            },
        }
    }

    pub fn trains_encoder(&self) -> bool {
        self.trainable() != Trainable::HeadOnly
    }

    pub fn trains_head(&self) -> bool {
        self.name != PhaseName::Pretrain && self.trainable() != Trainable::EncoderOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm clipping at [`CLIP_NORM`].
    #[serde(default)]
    pub clip_grad: bool,
    /// Steps encoder and head with one optimizer over both; only valid when
    /// their optimizer settings coincide.
    #[serde(default)]
    pub shared_optimizer: bool,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("train.phases is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let mains = self.phases.iter().filter(|p| p.name == PhaseName::Main).count();
        if mains != 1 {
            return Err(Error::Config(format!("need exactly one main phase, got {mains}")));
        }
        for w in self.phases.windows(2) {
            if w[0].name.order() >= w[1].name.order() {
                return Err(Error::Config(format!(
                    "phase {} cannot follow {}",
                    w[1].name.as_str(),
                    w[0].name.as_str()
                )));
            }
        }
        for p in &self.phases {
            if p.scheme.is_some() && p.name != PhaseName::Main {
                return Err(Error::Config(format!(
                    "scheme is only meaningful for the main phase, not {}",
                    p.name.as_str()
                )));
            }
            if p.name == PhaseName::Pretrain && p.trainable() != Trainable::EncoderOnly {
                return Err(Error::Config("pretrain trains the encoder only".into()));
            }
            if p.trains_encoder() && !(p.encoder_lr > 0.0) {
                return Err(Error::Config(format!("{}: encoder_lr must be positive", p.name.as_str())));
            }
            if p.trains_head() && !(p.head_lr > 0.0) {
                return Err(Error::Config(format!("{}: head_lr must be positive", p.name.as_str())));
            }
            if !p.stabilizers.is_empty() && p.name != PhaseName::Main {
                return Err(Error::Config("stabilizers fire at main-phase start only".into()));
            }
            if self.shared_optimizer
                && p.trains_encoder()
                && p.trains_head()
                && (p.encoder_lr != p.head_lr
                    || p.encoder_optimizer != p.head_optimizer
                    || p.encoder_schedule != p.head_schedule
                    || p.encoder_weight_decay != p.head_weight_decay)
            {
                return Err(Error::Config("shared_optimizer needs identical encoder and head settings".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: PhaseName,
    pub loss: f64,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,phase,loss,lr_encoder,lr_head,grad_norm")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{},{}", r.epoch, r.phase.as_str(), r.loss, r.lr_encoder, r.lr_head, r.grad_norm)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Per-component optimizer state for one phase.
struct Optimizers {
    encoder: Option<Optimizer>,
    head: Option<Optimizer>,
    shared: Option<Optimizer>,
}

/// Step-level quantities of one batch.
struct StepOut {
    loss: f64,
    grads_encoder: Vec<Tensor>,
    grads_head: Vec<Tensor>,
}

fn global_norm(parts: &[&[Tensor]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn to_diverged(e: Error, phase: PhaseName, epoch: usize) -> Error {
    match e {
        Error::Diverged { .. } => e,
        e if e.is_numerical() => Error::Diverged { phase: phase.as_str().into(), epoch, detail: e.to_string() },
        e => e,
    }
}

/// Params the encoder-side optimizer owns: encoder (and the auxiliary
/// classifier while pretraining).
fn encoder_side(model: &mut Model, pretrain: bool) -> Vec<&mut Tensor> {
    let mut p = model.encoder.params_mut();
    if pretrain {
        p.extend(model.aux.params_mut());
    }
    p
}

fn encoder_side_ref(model: &Model, pretrain: bool) -> Vec<&Tensor> {
    let mut p = model.encoder.params();
    if pretrain {
        p.extend(model.aux.params());
    }
    p
}

/// Runs every phase of `plan` on `train`, mutating `model` in place.
pub fn run(plan: &TrainPlan, model: &mut Model, train: &Dataset) -> Result<TrainLog> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train.dim() != model.encoder.config.input_dim {
        return Err(Error::Shape(format!(
            "training inputs have {} features, encoder expects {}",
            train.dim(),
            model.encoder.config.input_dim
        )));
    }
    let mut log = TrainLog::default();
    let mut gp_eps = rng::stream(plan.seed, "gp_eps");
    for phase in &plan.phases {
        if phase.name == PhaseName::Main {
            start_main(phase, model, train, plan.seed)?;
        }
        if phase.trains_head() {
            place_inducing(model, train, plan.seed)?;
        }
        run_phase(plan, phase, model, train, &mut gp_eps, &mut log)?;
    }
    Ok(log)
}

fn start_main(phase: &Phase, model: &mut Model, train: &Dataset, seed: u64) -> Result<()> {
    for s in &phase.stabilizers {
        match s {
            Stabilizer::ResetLastLayer => model.encoder.reset_last_layer(seed),
            Stabilizer::FinalBatchnorm if model.encoder.final_bn.is_none() => {
                // calibrate the new layer on current embeddings so it
                // normalizes even when the encoder stays frozen
                let z = model.embed(&train.inputs)?;
                model.encoder.attach_final_batchnorm();
                let bn = model.encoder.final_bn.as_mut().expect("attached");
                let (n, h) = z.dims2()?;
                for j in 0..h {
                    let mean = (0..n).map(|i| z.get2(i, j)).sum::<f64>() / n as f64;
                    let var = (0..n).map(|i| (z.get2(i, j) - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
                    bn.running_mean[j] = mean;
                    bn.running_var[j] = var;
                }
            }
            Stabilizer::FinalBatchnorm => {}
        }
    }
    Ok(())
}

fn place_inducing(model: &mut Model, train: &Dataset, seed: u64) -> Result<()> {
    let Head::Gp { head, .. } = &mut model.head else { return Ok(()) };
    if head.inducing_initialized {
        return Ok(());
    }
    let mut r = rng::stream(seed, "inducing_sample");
    let m = train.len().min(INDUCING_SAMPLE);
    let idx = rand::seq::index::sample(&mut r, train.len(), m).into_vec();
    let z = model.encoder.embed(&train.inputs.select_rows(&idx))?;
    let Head::Gp { head, .. } = &mut model.head else { unreachable!() };
    let k = head.num_inducing();
    head.set_inducing(init_inducing(&z, k, seed)?)
}

fn run_phase(
    plan: &TrainPlan,
    phase: &Phase,
    model: &mut Model,
    train: &Dataset,
    gp_eps: &mut rng::Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let pretrain = phase.name == PhaseName::Pretrain;
    let enc_on = phase.trains_encoder();
    let head_on = phase.trains_head();
    let n = train.len();
    let batches = n.div_ceil(plan.batch_size);
    let total = phase.epochs * batches;
    let shared = plan.shared_optimizer && enc_on && head_on;

    let mut opts = Optimizers {
        encoder: (enc_on && !shared)
            .then(|| Optimizer::new(phase.encoder_optimizer, &encoder_side_ref(model, pretrain))),
        head: (head_on && !shared).then(|| Optimizer::new(phase.head_optimizer, &model.head.params())),
        shared: shared.then(|| {
            let mut p = encoder_side_ref(model, pretrain);
            p.extend(model.head.params());
            Optimizer::new(phase.encoder_optimizer, &p)
        }),
    };
    // a frozen encoder is evaluated once per phase
    let cached = if enc_on { None } else { Some(model.embed(&train.inputs)?) };
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..phase.epochs {
        let mut shuffle = rng::stream(plan.seed, &format!("shuffle/{}/{epoch}", phase.name.as_str()));
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        let mut lrs = (0.0, 0.0);
        for b in 0..batches {
            let step = epoch * batches + b;
            let lr_enc = if enc_on { schedule_lr(&phase.encoder_schedule, phase.encoder_lr, step, total) } else { 0.0 };
            let lr_head = if head_on { schedule_lr(&phase.head_schedule, phase.head_lr, step, total) } else { 0.0 };
            if b == 0 {
                lrs = (lr_enc, lr_head);
            }
            let idx = &order[b * plan.batch_size..((b + 1) * plan.batch_size).min(n)];
            if enc_on && model.encoder.config.constraint == Constraint::Bilipschitz {
                model.encoder.spectral_step()?;
            }
            let out = batch_step(model, phase, train, idx, cached.as_ref(), n, gp_eps)
                .map_err(|e| to_diverged(e, phase.name, epoch))?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    phase: phase.name.as_str().into(),
                    epoch,
                    detail: format!("loss is {}", out.loss),
                });
            }
            let (mut ge, mut gh) = (out.grads_encoder, out.grads_head);
            let norm = global_norm(&[&ge, &gh]);
            if plan.clip_grad && norm > CLIP_NORM {
                let s = CLIP_NORM / norm;
                ge.iter_mut().chain(gh.iter_mut()).for_each(|t| *t = t.scale(s));
            }
            if let Some(opt) = opts.shared.as_mut() {
                let mut grads = ge;
                grads.extend(gh);
                let Model { encoder, head, aux, .. } = &mut *model;
                let mut params = encoder.params_mut();
                if pretrain {
                    params.extend(aux.params_mut());
                }
                params.extend(head.params_mut());
                opt.step(params, &grads, lr_enc, phase.encoder_weight_decay)?;
            } else {
                if let Some(opt) = opts.encoder.as_mut() {
                    opt.step(encoder_side(model, pretrain), &ge, lr_enc, phase.encoder_weight_decay)?;
                }
                if let Some(opt) = opts.head.as_mut() {
                    opt.step(model.head.params_mut(), &gh, lr_head, phase.head_weight_decay)?;
                }
            }
            loss_sum += out.loss;
            norm_sum += norm;
        }
        log.rows.push(LogRow {
            epoch,
            phase: phase.name,
            loss: loss_sum / batches as f64,
            lr_encoder: lrs.0,
            lr_head: lrs.1,
            grad_norm: norm_sum / batches as f64,
        });
    }
    Ok(())
}

fn batch_step(
    model: &mut Model,
    phase: &Phase,
    train: &Dataset,
    idx: &[usize],
    cached: Option<&Tensor>,
    n_total: usize,
    gp_eps: &mut rng::Rng,
) -> Result<StepOut> {
    let pretrain = phase.name == PhaseName::Pretrain;
    let enc_on = phase.trains_encoder();
    let head_on = phase.trains_head();
    let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
    let g = Graph::new();
    let x = g.constant(train.inputs.select_rows(idx));

    let (z, recon, enc_bound, aux_bound) = match cached {
        Some(z) => (g.constant(z.select_rows(idx)), None, None, None),
        None => {
            let enc_bound = Bound::new(&g, &model.encoder, true);
            let out = model.encoder.forward(&enc_bound, x, Mode::Train)?;
            let recon = match out.x_hat {
                Some(xh) => Some(crate::encoder::reconstruction_loss(x, xh)?.scale(model.encoder.config.recon_lambda)?),
                None => None,
            };
            let aux_bound = pretrain.then(|| Bound::new(&g, &model.aux, true));
            (out.z, recon, Some(enc_bound), aux_bound)
        }
    };

    let head_bound = (!pretrain).then(|| Bound::new(&g, &model.head, head_on));
    let mut loss = if let Some(ab) = &aux_bound {
        cross_entropy(z, &mut ab.cursor(), &labels)?
    } else {
        let hb = head_bound.as_ref().expect("head bound outside pretraining");
        match &model.head {
            Head::NatPn(h) => {
                let out = h.forward(z, &mut hb.cursor())?;
                bayesian_loss(out.posterior.alpha, &labels, h.prior.entropy_lambda)?
            }
            Head::Gp { head, train_samples, .. } => {
                let mom = head.moments(z, &mut hb.cursor())?;
                let eps = head.sample_noise(*train_samples, labels.len(), gp_eps);
                head.elbo_loss(&mom, &labels, &eps, n_total)?
            }
        }
    };
    if let Some(r) = recon {
        loss = loss.add(r)?;
    }
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok(StepOut { loss: value, grads_encoder: Vec::new(), grads_head: Vec::new() });
    }
    let grads = g.backward(loss)?;
    let mut grads_encoder = match (&enc_bound, enc_on) {
        (Some(eb), true) => eb.grads(&grads),
        _ => Vec::new(),
    };
    if let Some(ab) = &aux_bound {
        grads_encoder.extend(ab.grads(&grads));
    }
    let grads_head = match (&head_bound, head_on) {
        (Some(hb), true) => hb.grads(&grads),
        _ => Vec::new(),
    };
    Ok(StepOut { loss: value, grads_encoder, grads_head })
}
