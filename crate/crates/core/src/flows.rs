//! Radial normalizing flow density on the latent space.
//!
//! Densities are evaluated in the data -> base direction: each layer maps
//! `z -> z + β h(r) (z - z0)` with `h = 1 / (α + r)`, and the final point is
//! scored under a standard normal.

use numcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softplus_inverse, Binding, Bound, Parameterized};

pub const TOY_FLOW_LAYERS: usize = 8;
pub const DEFAULT_FLOW_LAYERS: usize = 16;
const Z0_INIT_STD: f64 = 0.1;
/// Keeps `r = ‖z − z0‖` differentiable at `z = z0`.
const RADIUS_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialLayer {
    pub z0: Tensor,
    pub alpha_raw: Tensor,
    pub beta_raw: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFlowStack {
    pub dim: usize,
    pub layers: Vec<RadialLayer>,
}

impl RadialFlowStack {
    /// Near-identity start: `α ≈ 1`, `β ≈ 0`, small random centers.
    pub fn new<R: Rng + ?Sized>(dim: usize, num_layers: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, Z0_INIT_STD).expect("positive std");
        let raw = softplus_inverse(1.0);
        let layers = (0..num_layers)
            .map(|_| RadialLayer {
                z0: Tensor::from_vec((0..dim).map(|_| normal.sample(rng)).collect()),
                alpha_raw: Tensor::from_vec(vec![raw]),
                beta_raw: Tensor::from_vec(vec![raw]),
            })
            .collect();
        Self { dim, layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// One layer: returns the transported points and the per-row log|det J|.
    pub fn layer_forward<'g>(
        z: Var<'g>,
        z0: Var<'g>,
        alpha_raw: Var<'g>,
        beta_raw: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let dim = z.shape()[1] as f64;
        let alpha = alpha_raw.softplus()?;
        let beta = beta_raw.softplus()?.sub(alpha)?;
        let diff = z.sub(z0)?;
        let r = diff.square()?.sum_axis(1, true)?.add_scalar(RADIUS_FLOOR)?.sqrt()?;
        let denom = r.add(alpha)?;
        let bh = beta.div(denom)?;
        let out = z.add(bh.mul(diff)?)?;
        // 1 + βh + βh'r simplifies to 1 + βα/(α+r)²
        let tail = beta.mul(alpha)?.div(denom.square()?)?.add_scalar(1.0)?.ln()?;
        let logdet = bh.add_scalar(1.0)?.ln()?.scale(dim - 1.0)?.add(tail)?;
        let n = z.shape()[0];
        Ok((out, logdet.reshape(&[n])?))
    }

    /// Per-row log-density of `z: N×H` on the graph.
    pub fn log_prob_var<'g>(&self, z: Var<'g>, b: &mut Binding<'_, 'g>) -> Result<Var<'g>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("flow over {} dims got {:?}", self.dim, shape)));
        }
        let n = shape[0];
        let mut u = z;
        let mut total: Option<Var<'g>> = None;
        for (i, _) in self.layers.iter().enumerate() {
            let (z0, a, bt) = (b.next_var(), b.next_var(), b.next_var());
            let (next, logdet) = Self::layer_forward(u, z0, a, bt)?;
            if !next.value().all_finite() || !logdet.value().all_finite() {
                return Err(Error::NonFinite { layer: i });
            }
            u = next;
            total = Some(match total {
                Some(t) => t.add(logdet)?,
                None => logdet,
            });
        }
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let base = u
            .square()?
            .sum_axis(1, false)?
            .scale(-0.5)?
            .add_scalar(-(self.dim as f64) * half_log_2pi)?
            .reshape(&[n])?;
        let out = match total {
            Some(t) => base.add(t)?,
            None => base,
        };
        if !out.value().all_finite() {
            return Err(Error::NonFinite { layer: self.layers.len() });
        }
        Ok(out)
    }

    /// Log-densities off the tape.
    pub fn log_prob(&self, z: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = Bound::new(&g, self, false);
        let lp = self.log_prob_var(g.constant(z.clone()), &mut bound.cursor())?;
        Ok(lp.value().data().to_vec())
    }

    /// Log|det J| of every layer at `z` (rows), plus the transported points.
    pub fn layer_logdets(&self, z: &Tensor) -> Result<Vec<(Tensor, Vec<f64>)>> {
        let g = Graph::new();
        let mut u = g.constant(z.clone());
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (next, ld) = Self::layer_forward(
                u,
                g.constant(l.z0.clone()),
                g.constant(l.alpha_raw.clone()),
                g.constant(l.beta_raw.clone()),
            )?;
            out.push((u.value().as_ref().clone(), ld.value().data().to_vec()));
            u = next;
        }
        Ok(out)
    }

    /// Applies a single layer to one point, off the tape.
    pub fn apply_layer(&self, layer: usize, z: &[f64]) -> Vec<f64> {
        let l = &self.layers[layer];
        let alpha = crate::nn::softplus(l.alpha_raw.data()[0]);
        let beta = crate::nn::softplus(l.beta_raw.data()[0]) - alpha;
        let diff: Vec<f64> = z.iter().zip(l.z0.data()).map(|(a, b)| a - b).collect();
        let r = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let bh = beta / (alpha + r);
        z.iter().zip(&diff).map(|(zi, d)| zi + bh * d).collect()
    }
}

/// Mean negative log-likelihood of the batch under the flow.
pub fn fit_nll_loss<'g>(stack: &RadialFlowStack, z: Var<'g>, b: &mut Binding<'_, 'g>) -> Result<Var<'g>> {
    Ok(stack.log_prob_var(z, b)?.mean()?.neg()?)
}

impl Parameterized for RadialFlowStack {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.z0, &l.alpha_raw, &l.beta_raw]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.z0, &mut l.alpha_raw, &mut l.beta_raw]).collect()
    }
}
