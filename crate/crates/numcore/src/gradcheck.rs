//! Central finite-difference gradient checking.
//!
//! Only forward values are used on the finite-difference side, so the check
//! is independent of every backward rule it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing autodiff against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖autodiff − fd‖ / max(‖autodiff‖ + ‖fd‖, floor)` over all inputs.
    pub rel_error: f64,
    pub autodiff: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;

/// Compares gradients of the scalar returned by `f` with respect to every
/// tensor in `inputs`.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let autodiff = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut nd = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            let h = STEP * orig.abs().max(1.0);
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            nd.data_mut()[i] = (up - down) / (2.0 * h);
        }
        numeric.push(nd);
    }
    let (mut diff, mut scale) = (0.0, 0.0);
    for (a, n) in autodiff.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
        }
        scale += a.norm() + n.norm();
    }
    let rel_error = diff.sqrt() / scale.max(1e-8);
    Ok(GradCheck { rel_error, autodiff, numeric })
}
