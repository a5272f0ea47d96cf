//! Independent reference implementations used by the test suites. None of
//! them touches the autodiff tape or the library's own linear algebra.
#![allow(dead_code)]

use dum_core::gp::{KernelConfig, KernelFamily};
use nalgebra::{DMatrix, DVector};
use numcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

pub fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

pub fn top_singular_value(t: &Tensor) -> f64 {
    to_matrix(t).singular_values().max()
}

/// log|det J| of `f` at `z` from a central-difference Jacobian.
pub fn fd_logdet(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64], h: f64) -> f64 {
    let d = z.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut x = z.to_vec();
    for j in 0..d {
        x[j] = z[j] + h;
        let up = f(&x);
        x[j] = z[j] - h;
        let down = f(&x);
        x[j] = z[j];
        for i in 0..d {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

/// Trapezoid rule for ∬ exp(log_density) over `[lo, hi]²` with `n` nodes per
/// axis. `log_density` receives an `n x 2` batch (one grid row at a time).
pub fn trapezoid_2d(log_density: impl Fn(&Tensor) -> Vec<f64>, lo: f64, hi: f64, n: usize) -> f64 {
    let step = (hi - lo) / (n - 1) as f64;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for iy in 0..n {
        let y = lo + step * iy as f64;
        let mut pts = Vec::with_capacity(2 * n);
        for ix in 0..n {
            pts.push(lo + step * ix as f64);
            pts.push(y);
        }
        let lp = log_density(&Tensor::new(vec![n, 2], pts).unwrap());
        for (ix, v) in lp.iter().enumerate() {
            total += weight(ix) * weight(iy) * v.exp();
        }
    }
    total * step * step
}

/// Exact GP regression posterior mean and latent variance at `xs`.
pub fn exact_gp(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_test_diag: &[f64],
    y: &[f64],
    noise: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let a = k_train + DMatrix::identity(n, n) * noise;
    let chol = a.cholesky().expect("SPD");
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let mean = k_cross * &alpha;
    let v = chol.solve(&k_cross.transpose());
    let var = (0..k_cross.nrows())
        .map(|i| k_test_diag[i] - (0..n).map(|j| k_cross[(i, j)] * v[(j, i)]).sum::<f64>())
        .collect();
    (mean.iter().copied().collect(), var)
}

/// O(N·M) AUROC: fraction of (id, ood) pairs ranked correctly, ties ½.
pub fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

pub fn brier_naive(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        for (c, &pc) in p.iter().enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            total += (pc - t) * (pc - t);
        }
    }
    total / labels.len() as f64
}

/// Monte-Carlo Dirichlet entropy −E[log p(θ)] with its standard error.
pub fn dirichlet_entropy_mc<R: Rng>(alpha: &[f64], draws: usize, rng: &mut R) -> (f64, f64) {
    let a0: f64 = alpha.iter().sum();
    let log_norm = ln_gamma(a0) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let g: Vec<f64> = gammas.iter().map(|d| d.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        // log θ_c = log g_c − log Σ g, kept in log space for tiny α
        let log_total = total.ln();
        let lp: f64 = log_norm + alpha.iter().zip(&g).map(|(&a, &gc)| (a - 1.0) * (gc.ln() - log_total)).sum::<f64>();
        s += -lp;
        s2 += lp * lp;
    }
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Squared Euclidean distances between rows.
pub fn sq_dists(a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Closed-form kernels over squared distances, written out independently
/// of the library.
pub fn kernel_oracle(cfg: &KernelConfig, d2: f64) -> f64 {
    let l2 = cfg.lengthscale * cfg.lengthscale;
    let r = (d2 / l2).sqrt();
    let shape = match cfg.family {
        KernelFamily::Rbf => (-0.5 * d2 / l2).exp(),
        KernelFamily::Rq => (1.0 + d2 / (2.0 * cfg.rq_alpha * l2)).powf(-cfg.rq_alpha),
        KernelFamily::Matern12 => (-r).exp(),
        KernelFamily::Matern32 => (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp(),
        KernelFamily::Matern52 => (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp(),
    };
    cfg.outputscale * shape
}
