//! MLP core architecture `x -> z` with the three architecture knobs:
//! residual connections, a soft spectral-norm Lipschitz bound, and a
//! reconstruction decoder. Also hosts the two training stabilizers (final
//! batch norm, last-layer reset).
//!
//! Layout for `num_layers = L`: a plain projection `D -> hidden`, then
//! `L - 2` hidden blocks `hidden -> hidden` with ReLU, then a linear
//! `hidden -> H`. With a residual or bi-Lipschitz constraint each hidden block
//! computes `h + relu(W h + b)`, and the last layer `h + W h + b` when
//! `H == hidden`.

use numcore::{power_iteration, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binding, Bound, Linear, Parameterized};
use crate::rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    Residual,
    Bilipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input dimension; 0 means "take it from the dataset".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub latent_dim: usize,
    #[serde(default = "default_constraint")]
    pub constraint: Constraint,
    /// Lipschitz constant for the bi-Lipschitz constraint. Left unset, the
    /// head decides (4 for the GP head, 5 for the evidential head).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_c: Option<f64>,
    #[serde(default)]
    pub use_final_batchnorm: bool,
    #[serde(default)]
    pub recon_lambda: f64,
}

fn default_hidden() -> usize {
    128
}
fn default_layers() -> usize {
    4
}
fn default_constraint() -> Constraint {
    Constraint::None
}

impl EncoderConfig {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: default_hidden(),
            num_layers: default_layers(),
            latent_dim,
            constraint: Constraint::None,
            lipschitz_c: None,
            use_final_batchnorm: false,
            recon_lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::Config("encoder needs at least two linear layers".into()));
        }
        if self.recon_lambda < 0.0 {
            return Err(Error::Config("recon_lambda must be non-negative".into()));
        }
        if self.constraint == Constraint::Bilipschitz {
            match self.lipschitz_c {
                Some(c) if c > 0.0 => {}
                _ => return Err(Error::Config("bilipschitz needs lipschitz_c > 0".into())),
            }
        }
        Ok(())
    }

    fn residual(&self) -> bool {
        self.constraint != Constraint::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Largest per-channel gain `|γ| / sqrt(running_var + eps)`.
    pub fn gain(&self) -> f64 {
        self.gamma.data().iter().zip(&self.running_var).map(|(g, v)| g.abs() / (v + BN_EPS).sqrt()).fold(0.0, f64::max)
    }
}

/// Persisted power-iteration vectors for one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
    pub spectral: Vec<SpectralState>,
    pub final_bn: Option<BatchNorm>,
    pub decoder: Vec<Linear>,
}

pub struct EncoderOutput<'g> {
    pub z: Var<'g>,
    pub x_hat: Option<Var<'g>>,
}

/// Batch statistics to fold into the running averages after a train step.
struct BnUpdate {
    mean: Vec<f64>,
    var: Vec<f64>,
    n: usize,
}

fn mlp_widths(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|i| {
            let a = if i == 0 { input } else { hidden };
            let b = if i + 1 == layers { output } else { hidden };
            (a, b)
        })
        .collect()
}

fn init_spectral(w: &Tensor, r: &mut rng::Rng) -> SpectralState {
    let m = w.shape()[0];
    let u0 = Tensor::randn(&[m], r);
    let n0 = u0.norm().max(f64::MIN_POSITIVE);
    let u: Vec<f64> = u0.data().iter().map(|x| x / n0).collect();
    let p = power_iteration(w, &u, 1).expect("shapes agree");
    SpectralState { u: p.u, v: p.v, sigma: p.sigma }
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "encoder");
        let layers: Vec<Linear> = mlp_widths(config.input_dim, config.hidden_dim, config.latent_dim, config.num_layers)
            .into_iter()
            .map(|(a, b)| Linear::new(a, b, &mut r))
            .collect();
        let spectral = layers.iter().map(|l| init_spectral(&l.weight, &mut r)).collect();
        let final_bn = config.use_final_batchnorm.then(|| BatchNorm::new(config.latent_dim));
        let decoder = if config.recon_lambda > 0.0 {
            mlp_widths(config.latent_dim, config.hidden_dim, config.input_dim, config.num_layers)
                .into_iter()
                .map(|(a, b)| Linear::new(a, b, &mut r))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { config, layers, spectral, final_bn, decoder })
    }

    fn lipschitz_c(&self) -> Option<f64> {
        match self.config.constraint {
            Constraint::Bilipschitz => self.config.lipschitz_c,
            _ => None,
        }
    }

    /// One power-iteration step per constrained weight.
    pub fn spectral_step(&mut self) -> Result<()> {
        if self.config.constraint != Constraint::Bilipschitz {
            return Err(Error::Config("spectral_step requires the bilipschitz constraint".into()));
        }
        for (layer, st) in self.layers.iter().zip(self.spectral.iter_mut()) {
            let p = power_iteration(&layer.weight, &st.u, 1)?;
            // a zero weight keeps its previous vectors
            if p.sigma > 0.0 {
                *st = SpectralState { u: p.u, v: p.v, sigma: p.sigma };
            } else {
                st.sigma = 0.0;
            }
        }
        Ok(())
    }

    /// Soft spectral normalization: `W · min(1, c / σ̂)` with
    /// `σ̂ = uᵀ W v` differentiable in `W`.
    fn effective_weight<'g>(&self, layer: usize, w: Var<'g>) -> Result<Var<'g>> {
        let Some(c) = self.lipschitz_c() else { return Ok(w) };
        let g = w.graph();
        let st = &self.spectral[layer];
        let u = g.constant(Tensor::new(vec![1, st.u.len()], st.u.clone())?);
        let v = g.constant(Tensor::new(vec![st.v.len(), 1], st.v.clone())?);
        let sigma = u.matmul(w)?.matmul(v)?.reshape(&[1])?;
        if sigma.value().item() <= c {
            return Ok(w);
        }
        Ok(w.mul(g.scalar(c).div(sigma)?)?)
    }

    /// Top singular value of every effective weight as used in eval mode,
    /// computed from the persisted power-iteration estimate.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .zip(&self.spectral)
            .map(|(l, st)| match self.lipschitz_c() {
                Some(c) => {
                    let wv =
                        l.weight.matmul(&Tensor::new(vec![st.v.len(), 1], st.v.clone()).expect("v")).expect("shape");
                    let sigma: f64 = st.u.iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                    if sigma > c {
                        l.weight.scale(c / sigma)
                    } else {
                        l.weight.clone()
                    }
                }
                None => l.weight.clone(),
            })
            .collect()
    }

    fn check_finite(v: Var<'_>, layer: usize) -> Result<()> {
        if v.value().all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { layer })
        }
    }

    fn forward_impl<'g>(
        &self,
        bound: &Bound<'g>,
        x: Var<'g>,
        mode: Mode,
    ) -> Result<(EncoderOutput<'g>, Option<BnUpdate>)> {
        let g = x.graph();
        let mut b = bound.cursor();
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..=last {
            let w = self.effective_weight(i, b.next_var())?;
            let bias = b.next_var();
            let a = Linear::apply(h, w, bias)?;
            let skip = self.config.residual() && i != 0 && h.shape() == a.shape();
            h = match (i == last, skip) {
                (true, true) => h.add(a)?,
                (true, false) => a,
                (false, true) => h.add(a.relu()?)?,
                (false, false) if i == 0 => a,
                (false, false) => a.relu()?,
            };
            Self::check_finite(h, i)?;
        }
        let mut update = None;
        let mut z = h;
        if let Some(bn) = &self.final_bn {
            let (out, up) = self.batch_norm(bn, z, &mut b, mode)?;
            Self::check_finite(out, self.layers.len())?;
            z = out;
            update = up;
        }
        let x_hat = if self.decoder.is_empty() { None } else { Some(decode(z, &mut b, self.decoder.len())?) };
        debug_assert_eq!(b.remaining(), 0);
        let _ = g;
        Ok((EncoderOutput { z, x_hat }, update))
    }

    fn batch_norm<'g>(
        &self,
        bn: &BatchNorm,
        z: Var<'g>,
        b: &mut Binding<'_, 'g>,
        mode: Mode,
    ) -> Result<(Var<'g>, Option<BnUpdate>)> {
        let g = z.graph();
        let gamma = b.next_var();
        let beta = b.next_var();
        let dim = bn.running_var.len();
        let (normed, update) = match mode {
            Mode::Train => {
                let n = z.shape()[0];
                let mean = z.mean_axis(0, true)?;
                let centered = z.sub(mean)?;
                let var = centered.square()?.mean_axis(0, true)?;
                let normed = centered.div(var.add_scalar(BN_EPS)?.sqrt()?)?;
                let up = BnUpdate { mean: mean.value().data().to_vec(), var: var.value().data().to_vec(), n };
                (normed, Some(up))
            }
            Mode::Eval => {
                let rm = g.constant(Tensor::new(vec![dim], bn.running_mean.clone())?);
                let sd =
                    g.constant(Tensor::new(vec![dim], bn.running_var.iter().map(|v| (v + BN_EPS).sqrt()).collect())?);
                (z.sub(rm)?.div(sd)?, None)
            }
        };
        let gamma = match self.lipschitz_c() {
            Some(c) => {
                let sd =
                    g.constant(Tensor::new(vec![dim], bn.running_var.iter().map(|v| (v + BN_EPS).sqrt()).collect())?);
                let gain = gamma.div(sd)?.square()?.max_axis(0, false)?.sqrt()?;
                if gain.value().item() > c {
                    gamma.mul(g.scalar(c).div(gain)?)?
                } else {
                    gamma
                }
            }
            None => gamma,
        };
        Ok((normed.mul(gamma)?.add(beta)?, update))
    }

    /// Forward pass; in train mode the final batch norm's running
    /// statistics are updated.
    pub fn forward<'g>(&mut self, bound: &Bound<'g>, x: Var<'g>, mode: Mode) -> Result<EncoderOutput<'g>> {
        let (out, update) = self.forward_impl(bound, x, mode)?;
        if let (Some(bn), Some(up)) = (self.final_bn.as_mut(), update) {
            let unbias = if up.n > 1 { up.n as f64 / (up.n - 1) as f64 } else { 1.0 };
            for j in 0..up.mean.len() {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * up.mean[j];
                bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * up.var[j] * unbias;
            }
        }
        Ok(out)
    }

    /// Eval-mode forward; never mutates state.
    pub fn forward_eval<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<EncoderOutput<'g>> {
        Ok(self.forward_impl(bound, x, Mode::Eval)?.0)
    }

    /// Eval-mode latent codes for a batch of inputs, off the tape.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = Bound::new(&g, self, false);
        let out = self.forward_eval(&bound, g.constant(x.clone()))?;
        Ok(out.z.value().as_ref().clone())
    }

    /// Re-initializes the `hidden -> H` projection; nothing else changes.
    pub fn reset_last_layer(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "reset_last_layer");
        let last = self.layers.len() - 1;
        let (a, b) = (self.layers[last].input_dim(), self.layers[last].output_dim());
        self.layers[last] = Linear::new(a, b, &mut r);
        self.spectral[last] = init_spectral(&self.layers[last].weight, &mut r);
    }

    /// Adds an identity-initialized batch norm on the latent output if there
    /// is none yet.
    pub fn attach_final_batchnorm(&mut self) {
        if self.final_bn.is_none() {
            self.final_bn = Some(BatchNorm::new(self.config.latent_dim));
            self.config.use_final_batchnorm = true;
        }
    }
}

fn decode<'g>(z: Var<'g>, b: &mut Binding<'_, 'g>, layers: usize) -> Result<Var<'g>> {
    let mut h = z;
    for i in 0..layers {
        h = Linear::forward(h, b)?;
        if i + 1 < layers {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Mean squared error over all entries; the caller applies `λ_rec`.
pub fn reconstruction_loss<'g>(x: Var<'g>, x_hat: Var<'g>) -> Result<Var<'g>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("reconstruction of {:?} from {:?}", x.shape(), x_hat.shape())));
    }
    Ok(x_hat.sub(x)?.square()?.mean()?)
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.params()).collect();
        if let Some(bn) = &self.final_bn {
            p.push(&bn.gamma);
            p.push(&bn.beta);
        }
        p.extend(self.decoder.iter().flat_map(|l| l.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        if let Some(bn) = &mut self.final_bn {
            p.push(&mut bn.gamma);
            p.push(&mut bn.beta);
        }
        p.extend(self.decoder.iter_mut().flat_map(|l| l.params_mut()));
        p
    }
}
