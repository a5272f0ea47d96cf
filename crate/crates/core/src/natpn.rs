//! Evidential head: linear decoder to class logits, flow-based evidence with
//! a certainty budget, conjugate Dirichlet update and the Bayesian loss.

use numcore::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{entropy_rows, UncertaintyScores};
use crate::flows::RadialFlowStack;
use crate::nn::{Binding, Bound, Linear, Parameterized};

/// Upper clamp on `log N_H + log p(z)`.
pub const LOG_EVIDENCE_MAX: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub n_prior: f64,
    pub chi_prior: Vec<f64>,
    pub entropy_lambda: f64,
}

impl PriorConfig {
    /// `n_prior = C`, uniform `χ_prior`.
    pub fn uniform(num_classes: usize, entropy_lambda: f64) -> Self {
        Self { n_prior: num_classes as f64, chi_prior: vec![1.0 / num_classes as f64; num_classes], entropy_lambda }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.n_prior > 0.0) {
            return Err(Error::Config("n_prior must be positive".into()));
        }
        if self.chi_prior.len() != num_classes {
            return Err(Error::Config(format!(
                "chi_prior has {} entries for {num_classes} classes",
                self.chi_prior.len()
            )));
        }
        if self.chi_prior.iter().any(|&c| !(c > 0.0)) || (self.chi_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("chi_prior must be a strictly positive simplex vector".into()));
        }
        if !(self.entropy_lambda >= 0.0) {
            return Err(Error::Config("entropy_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    DimNormalized,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub mode: BudgetMode,
    #[serde(default)]
    pub constant_value: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { mode: BudgetMode::DimNormalized, constant_value: 0.0 }
    }
}

impl BudgetConfig {
    pub fn constant(value: f64) -> Self {
        Self { mode: BudgetMode::Constant, constant_value: value }
    }

    /// `log N_H` for latent dimension `h`.
    pub fn log_budget(&self, h: usize) -> Result<f64> {
        match self.mode {
            BudgetMode::DimNormalized => Ok(0.5 * h as f64 * (4.0 * std::f64::consts::PI).ln()),
            BudgetMode::Constant if self.constant_value > 0.0 => Ok(self.constant_value.ln()),
            BudgetMode::Constant => Err(Error::Config("constant certainty budget must be positive".into())),
        }
    }
}

/// `n = exp(min(log N_H + log p, 30))`.
pub fn evidence<'g>(log_prob: Var<'g>, budget: &BudgetConfig, h: usize) -> Result<Var<'g>> {
    Ok(log_prob.add_scalar(budget.log_budget(h)?)?.clamp_max(LOG_EVIDENCE_MAX)?.exp()?)
}

/// Dirichlet posterior on the tape.
#[derive(Clone, Copy)]
pub struct PosteriorVars<'g> {
    pub alpha: Var<'g>,
    pub n_post: Var<'g>,
}

impl<'g> PosteriorVars<'g> {
    pub fn chi_post(&self) -> Result<Var<'g>> {
        let n = self.n_post.shape()[0];
        Ok(self.alpha.div(self.n_post.reshape(&[n, 1])?)?)
    }

    pub fn values(&self) -> Result<EvidentialPosterior> {
        let chi = self.chi_post()?;
        Ok(EvidentialPosterior {
            alpha: self.alpha.value().as_ref().clone(),
            n_post: self.n_post.value().data().to_vec(),
            chi_post: chi.value().as_ref().clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialPosterior {
    pub alpha: Tensor,
    pub n_post: Vec<f64>,
    pub chi_post: Tensor,
}

/// `α = n_prior χ_prior + n χ`, `n_post = n_prior + n`.
pub fn bayesian_update<'g>(chi: Var<'g>, n: Var<'g>, prior: &PriorConfig) -> Result<PosteriorVars<'g>> {
    let g = chi.graph();
    let rows = chi.shape()[0];
    if chi.shape()[1] != prior.chi_prior.len() || n.shape() != [rows] {
        return Err(Error::Shape(format!("update of {:?} with evidence {:?}", chi.shape(), n.shape())));
    }
    let prior_alpha = g.constant(Tensor::from_vec(prior.chi_prior.iter().map(|c| c * prior.n_prior).collect()));
    let alpha = n.reshape(&[rows, 1])?.mul(chi)?.add(prior_alpha)?;
    let n_post = n.add_scalar(prior.n_prior)?;
    Ok(PosteriorVars { alpha, n_post })
}

/// Per-row `H[Dir(α)]`.
pub fn dirichlet_entropy<'g>(alpha: Var<'g>) -> Result<Var<'g>> {
    let c = alpha.shape()[1] as f64;
    let a0 = alpha.sum_axis(1, false)?;
    let log_beta = alpha.lgamma()?.sum_axis(1, false)?.sub(a0.lgamma()?)?;
    let middle = a0.add_scalar(-c)?.mul(a0.digamma()?)?;
    let last = alpha.add_scalar(-1.0)?.mul(alpha.digamma()?)?.sum_axis(1, false)?;
    Ok(log_beta.add(middle)?.sub(last)?)
}

/// Batch mean of `−(ψ(α_y) − ψ(α₀)) − λ H[Dir(α)]`.
pub fn bayesian_loss<'g>(alpha: Var<'g>, labels: &[usize], lambda: f64) -> Result<Var<'g>> {
    if alpha.value().data().iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Num(numcore::Error::Domain("Dirichlet concentration must be positive".into())));
    }
    let a0 = alpha.sum_axis(1, false)?;
    let expected_ll = alpha.digamma()?.pick(labels)?.sub(a0.digamma()?)?;
    let mut per_row = expected_ll.neg()?;
    if lambda != 0.0 {
        per_row = per_row.sub(dirichlet_entropy(alpha)?.scale(lambda)?)?;
    }
    Ok(per_row.mean()?)
}

/// Label, predictive/aleatoric entropy of `α/α₀`, and `−n_post` as the
/// epistemic uncertainty.
pub fn scores(alpha: &Tensor) -> UncertaintyScores {
    let (n, c) = (alpha.shape()[0], alpha.shape()[1]);
    let mut probs = Tensor::zeros(&[n, c]);
    let mut n_post = Vec::with_capacity(n);
    for i in 0..n {
        let row = alpha.row(i);
        let a0: f64 = row.iter().sum();
        for (j, a) in row.iter().enumerate() {
            probs.set2(i, j, a / a0);
        }
        n_post.push(a0);
    }
    let predictive = entropy_rows(&probs);
    UncertaintyScores {
        predicted_label: crate::eval::argmax_rows(&probs),
        aleatoric: Some(predictive.clone()),
        epistemic: Some(n_post.iter().map(|v| -v).collect()),
        predictive,
        probs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatPnHead {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub decoder: Linear,
    pub flow: RadialFlowStack,
    pub prior: PriorConfig,
    pub budget: BudgetConfig,
}

/// Everything the loss and the scores need from one forward pass.
pub struct NatPnOutput<'g> {
    pub posterior: PosteriorVars<'g>,
    pub log_prob: Var<'g>,
}

impl NatPnHead {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        num_classes: usize,
        flow_layers: usize,
        prior: PriorConfig,
        budget: BudgetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        prior.validate(num_classes)?;
        budget.log_budget(latent_dim)?;
        Ok(Self {
            latent_dim,
            num_classes,
            decoder: Linear::new(latent_dim, num_classes, rng),
            flow: RadialFlowStack::new(latent_dim, flow_layers, rng),
            prior,
            budget,
        })
    }

    pub fn forward<'g>(&self, z: Var<'g>, b: &mut Binding<'_, 'g>) -> Result<NatPnOutput<'g>> {
        let chi = Linear::forward(z, b)?.softmax(1)?;
        let log_prob = self.flow.log_prob_var(z, b)?;
        let n = evidence(log_prob, &self.budget, self.latent_dim)?;
        let posterior = bayesian_update(chi, n, &self.prior)?;
        Ok(NatPnOutput { posterior, log_prob })
    }

    pub fn loss<'g>(&self, out: &NatPnOutput<'g>, labels: &[usize]) -> Result<Var<'g>> {
        bayesian_loss(out.posterior.alpha, labels, self.prior.entropy_lambda)
    }

    /// Posterior and flow log-density for fixed latents, off the tape.
    pub fn posterior(&self, z: &Tensor) -> Result<(EvidentialPosterior, Vec<f64>)> {
        let g = Graph::new();
        let bound = Bound::new(&g, self, false);
        let out = self.forward(g.constant(z.clone()), &mut bound.cursor())?;
        Ok((out.posterior.values()?, out.log_prob.value().data().to_vec()))
    }

    pub fn predict(&self, z: &Tensor) -> Result<UncertaintyScores> {
        Ok(scores(&self.posterior(z)?.0.alpha))
    }
}

impl Parameterized for NatPnHead {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.decoder.params();
        p.extend(self.flow.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.decoder.params_mut();
        p.extend(self.flow.params_mut());
        p
    }
}
