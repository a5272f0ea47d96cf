//! Gradient-check cases shared by the core suites and the acceptance run.
//! Each case returns its name and the relative error against central
//! differences.
#![allow(dead_code)]

use dum_core::encoder::{reconstruction_loss, Constraint, Encoder, EncoderConfig, Mode};
use dum_core::gp::{GpHead, KernelConfig, KernelFamily};
use dum_core::natpn::{BudgetConfig, NatPnHead, PriorConfig};
use dum_core::nn::{Bound, Parameterized};
use dum_core::rng;
use numcore::gradcheck::check;
use numcore::{BinaryOp, ReduceOp, Tensor, UnaryOp};
use rand::Rng;

pub type Case = (String, f64);

fn positive(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::randn(shape, r).map(|x| x.abs() + 0.2)
}

fn rel(res: numcore::Result<numcore::gradcheck::GradCheck>) -> f64 {
    res.map(|c| c.rel_error).unwrap_or(f64::INFINITY)
}

/// One case per differentiable primitive per seed.
pub fn op_cases(seeds: u64) -> Vec<Case> {
    let unary = [
        (UnaryOp::Exp, false),
        (UnaryOp::Log, true),
        (UnaryOp::Tanh, false),
        (UnaryOp::Relu, false),
        (UnaryOp::Softplus, false),
        (UnaryOp::Sigmoid, false),
        (UnaryOp::Neg, false),
        (UnaryOp::Sqrt, true),
        (UnaryOp::Lgamma, true),
        (UnaryOp::Digamma, true),
        (UnaryOp::PowScalar(2.5), true),
        (UnaryOp::Scale(-1.5), false),
        (UnaryOp::AddScalar(3.0), false),
        (UnaryOp::ClampMin(0.1), false),
        (UnaryOp::ClampMax(-0.1), false),
    ];
    let binary = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow];
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "op cases");
        for (op, pos) in unary {
            let x = if pos { positive(&[3, 4], &mut r) } else { Tensor::randn(&[3, 4], &mut r) };
            // the central difference is meaningless right at a kink
            let kink = match op {
                UnaryOp::Relu => Some(0.0),
                UnaryOp::ClampMin(k) | UnaryOp::ClampMax(k) => Some(k),
                _ => None,
            };
            let x = match kink {
                Some(k) => x.map(|v| if (v - k).abs() < 1e-2 { k + 0.05 } else { v }),
                None => x,
            };
            let w = Tensor::randn(&[3, 4], &mut r);
            let e = rel(check(&[x], |g, v| v[0].unary(op)?.mul(g.constant(w.clone()))?.sum()));
            out.push((format!("{op:?}"), e));
        }
        for op in binary {
            // broadcast a row vector against a matrix
            let (a, b) = (positive(&[3, 4], &mut r), positive(&[4], &mut r));
            let e = rel(check(&[a, b], |_, v| v[0].binary(op, v[1])?.square()?.sum()));
            out.push((format!("{op:?}"), e));
        }
        for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::LogSumExp, ReduceOp::Max] {
            let x = Tensor::randn(&[2, 3, 4], &mut r);
            let axis = r.random_range(0..3);
            let e = rel(check(&[x], |_, v| v[0].reduce(op, axis, false)?.square()?.sum()));
            out.push((format!("{op:?}"), e));
        }
        let (a, b) = (Tensor::randn(&[5, 4], &mut r), Tensor::randn(&[4, 3], &mut r));
        out.push(("matmul".into(), rel(check(&[a, b], |_, v| v[0].matmul(v[1])?.tanh()?.sum()))));

        let (x, y) = (Tensor::randn(&[3, 4], &mut r), Tensor::randn(&[3, 2], &mut r));
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..6)).collect();
        let e = rel(check(&[x, y], |_, v| {
            let t = v[0].transpose()?.square()?.sum_axis(0, false)?.sum()?;
            let c = v[0].graph().concat(&[v[0], v[1]], 1)?;
            let ls = c.log_softmax(1)?.pick(&labels)?.sum()?;
            let sm = c.softmax(1)?.square()?.sum()?;
            let rs = v[1].reshape(&[6])?.tanh()?.sum()?;
            t.add(ls)?.add(sm)?.add(rs)
        }));
        out.push(("transpose/concat/softmax/pick/reshape".into(), e));

        let n = 1 + seed as usize % 5;
        let (m, rhs) = (Tensor::randn(&[n, n], &mut r), Tensor::randn(&[n, 2], &mut r));
        let e = rel(check(&[m, rhs], |g, v| {
            let a = v[0].transpose()?.matmul(v[0])?.add(g.constant(Tensor::eye(n).scale(0.5)))?;
            let (l, _) = a.cholesky(0.0)?;
            let logdet = l.mul(g.constant(Tensor::eye(n)))?.sum_axis(1, false)?.ln()?.sum()?;
            l.solve_lower(v[1])?.square()?.sum()?.add(logdet)
        }));
        out.push(("cholesky/solve_lower".into(), e));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub enum HeadKind {
    NatPn,
    Gp(KernelFamily),
}

#[derive(Debug, Clone, Copy)]
pub struct E2e {
    pub constraint: Constraint,
    pub batchnorm: bool,
    pub recon: f64,
    pub head: HeadKind,
    /// Latent equal to the hidden width turns on the last-layer residual.
    pub latent: usize,
}

const INPUT: usize = 3;
const HIDDEN: usize = 6;
const CLASSES: usize = 3;
const BATCH: usize = 5;

pub fn e2e_configs() -> Vec<E2e> {
    let mut out = Vec::new();
    for constraint in [Constraint::None, Constraint::Residual, Constraint::Bilipschitz] {
        for batchnorm in [false, true] {
            for recon in [0.0, 0.5] {
                for head in [HeadKind::NatPn, HeadKind::Gp(KernelFamily::Rbf), HeadKind::Gp(KernelFamily::Matern32)] {
                    let latent = if recon > 0.0 { 4 } else { HIDDEN };
                    out.push(E2e { constraint, batchnorm, recon, head, latent });
                }
            }
        }
    }
    out
}

enum BuiltHead {
    NatPn(NatPnHead),
    Gp(GpHead, Tensor),
}

/// Loss of encoder + head on a fixed batch, differentiated with respect to
/// the inputs and every parameter of both modules.
pub fn e2e_case(cfg: E2e, seed: u64) -> Case {
    let mut r = rng::stream(seed, "e2e case");
    let mut ec = EncoderConfig::new(INPUT, cfg.latent);
    ec.hidden_dim = HIDDEN;
    ec.num_layers = 3;
    ec.constraint = cfg.constraint;
    // small enough that both the weight and the gain constraints engage
    ec.lipschitz_c = (cfg.constraint == Constraint::Bilipschitz).then_some(0.5);
    ec.use_final_batchnorm = cfg.batchnorm;
    ec.recon_lambda = cfg.recon;
    let mut enc = Encoder::new(ec, seed).unwrap();
    if cfg.constraint == Constraint::Bilipschitz {
        for _ in 0..20 {
            enc.spectral_step().unwrap();
        }
    }
    if let Some(bn) = enc.final_bn.as_mut() {
        bn.gamma = Tensor::randn(&[cfg.latent], &mut r).map(|g| 1.0 + 0.3 * g);
        bn.running_var = (0..cfg.latent).map(|_| r.random_range(0.5..2.0)).collect();
    }
    let labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
    let head = match cfg.head {
        HeadKind::NatPn => BuiltHead::NatPn(
            NatPnHead::new(
                cfg.latent,
                CLASSES,
                2,
                PriorConfig::uniform(CLASSES, 1e-2),
                BudgetConfig::default(),
                &mut r,
            )
            .unwrap(),
        ),
        HeadKind::Gp(family) => {
            let mut h = GpHead::new(cfg.latent, CLASSES, 4, &KernelConfig::new(family), &mut r).unwrap();
            h.var_mean = Tensor::randn(&[4, CLASSES], &mut r).scale(0.5);
            for c in &mut h.var_chol_raw {
                *c = c.zip_map(&Tensor::randn(&[4, 4], &mut r), |a, b| a + 0.1 * b).unwrap();
            }
            let eps = h.sample_noise(2, BATCH, &mut r);
            BuiltHead::Gp(h, eps)
        }
    };
    let x = Tensor::randn(&[BATCH, INPUT], &mut r);
    let enc_params: Vec<Tensor> = enc.params().into_iter().cloned().collect();
    let head_params: Vec<Tensor> = match &head {
        BuiltHead::NatPn(h) => h.params().into_iter().cloned().collect(),
        BuiltHead::Gp(h, _) => h.params().into_iter().cloned().collect(),
    };
    let ne = enc_params.len();
    let mut inputs = vec![x];
    inputs.extend(enc_params);
    inputs.extend(head_params);

    let e = rel(check(&inputs, |_, vars| {
        let enc_bound = Bound::from_vars(vars[1..1 + ne].to_vec());
        let head_bound = Bound::from_vars(vars[1 + ne..].to_vec());
        let mut e = enc.clone();
        let out = e.forward(&enc_bound, vars[0], Mode::Train).map_err(to_num)?;
        let mut total = match &head {
            BuiltHead::NatPn(h) => {
                let o = h.forward(out.z, &mut head_bound.cursor()).map_err(to_num)?;
                h.loss(&o, &labels).map_err(to_num)?
            }
            BuiltHead::Gp(h, eps) => {
                let mom = h.moments(out.z, &mut head_bound.cursor()).map_err(to_num)?;
                h.elbo_loss(&mom, &labels, eps, 50).map_err(to_num)?
            }
        };
        if let Some(xh) = out.x_hat {
            total = total.add(reconstruction_loss(vars[0], xh).map_err(to_num)?.scale(cfg.recon)?)?;
        }
        Ok(total)
    }));
    (format!("{cfg:?} seed {seed}"), e)
}

fn to_num(e: dum_core::Error) -> numcore::Error {
    match e {
        dum_core::Error::Num(n) => n,
        other => numcore::Error::Domain(other.to_string()),
    }
}

pub fn e2e_cases(seeds: u64) -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for cfg in e2e_configs() {
            out.push(e2e_case(cfg, seed));
        }
    }
    out
}
