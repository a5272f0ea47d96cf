//! Layer building blocks and parameter binding.
//!
//! Models keep their parameters as plain [`Tensor`]s. For every training
//! step the parameters are copied onto a fresh [`Graph`] (as trainable
//! leaves or frozen constants) in the order given by
//! [`Parameterized::params`]; forward code consumes the bound vars in that
//! same order through a [`Binding`].

use numcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Parameters of one component placed on a graph.
pub struct Bound<'g> {
    pub vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn new<P: Parameterized + ?Sized>(g: &'g Graph, p: &P, trainable: bool) -> Self {
        let vars = p.params().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Self { vars }
    }

    /// Binds caller-made vars, in parameter order (for gradient checks).
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Self { vars }
    }

    pub fn cursor(&self) -> Binding<'_, 'g> {
        Binding { vars: &self.vars, pos: 0 }
    }

    /// Gradients in parameter order (zeros for unused parameters).
    pub fn grads(&self, grads: &numcore::Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Sequential reader over bound vars.
pub struct Binding<'a, 'g> {
    vars: &'a [Var<'g>],
    pos: usize,
}

impl<'g> Binding<'_, 'g> {
    pub fn next_var(&mut self) -> Var<'g> {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

/// Fully connected layer computing `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias uniform on ±1/√fan_in (the usual torch default).
    /// Wider He-style init pushes residual stacks far from the flow's base
    /// density at step zero.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let weight = (0..input * output).map(|_| dist.sample(rng)).collect();
        let bias = (0..output).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![input, output], weight).expect("shape"),
            bias: Tensor::new(vec![output], bias).expect("shape"),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply<'g>(x: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        Ok(x.matmul(weight)?.add(bias)?)
    }

    pub fn forward<'g>(x: Var<'g>, b: &mut Binding<'_, 'g>) -> Result<Var<'g>> {
        let w = b.next_var();
        let bias = b.next_var();
        Self::apply(x, w, bias)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
