//! Sparse variational GP classification head.
//!
//! One GP per class sharing the kernel and the `K` inducing locations. The
//! variational posterior is whitened: `u_c = L_zz v_c` with
//! `q(v_c) = N(m_c, L_c L_cᵀ)`, so the prior over `v_c` is standard normal.

use numcore::linalg::JITTER_START;
use numcore::{Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{argmax_rows, entropy_rows, UncertaintyScores};
use crate::nn::{softplus, softplus_inverse, Binding, Bound, Parameterized};
use crate::rng;

pub const TRAIN_SAMPLES: usize = 8;
pub const EVAL_SAMPLES: usize = 32;
pub const TOY_INDUCING: usize = 20;
pub const MNIST_INDUCING: usize = 100;
const KMEANS_ITERS: usize = 10;
/// Lower bound on `k_xx − q_xx` before adding the variational term.
const VAR_FLOOR: f64 = 1e-10;
/// Below this squared distance `r` is treated as zero (zero subgradient).
const R2_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Rq,
    Matern12,
    Matern32,
    Matern52,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] =
        [KernelFamily::Rbf, KernelFamily::Rq, KernelFamily::Matern12, KernelFamily::Matern32, KernelFamily::Matern52];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub outputscale: f64,
    #[serde(default = "one")]
    pub rq_alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelConfig {
    pub fn new(family: KernelFamily) -> Self {
        Self { family, lengthscale: 1.0, outputscale: 1.0, rq_alpha: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.outputscale > 0.0 && self.rq_alpha > 0.0) {
            return Err(Error::Config("kernel lengthscale, outputscale and rq_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise squared distances `n×m`, formed from explicit differences so
/// identical rows give exactly zero.
fn sq_dist<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let (n, h) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    if b.shape()[1] != h {
        return Err(Error::Shape(format!("kernel inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    let d = a.reshape(&[n, 1, h])?.sub(b.reshape(&[1, m, h])?)?;
    Ok(d.square()?.sum_axis(2, false)?)
}

/// Gram matrix with lengthscale and outputscale given as `[1]` vars.
pub fn kernel_var<'g>(
    family: KernelFamily,
    rq_alpha: f64,
    a: Var<'g>,
    b: Var<'g>,
    lengthscale: Var<'g>,
    outputscale: Var<'g>,
) -> Result<Var<'g>> {
    let d2 = sq_dist(a, b)?.div(lengthscale.square()?)?;
    let shape = match family {
        KernelFamily::Rbf => d2.scale(-0.5)?.exp()?,
        KernelFamily::Rq => d2.scale(0.5 / rq_alpha)?.add_scalar(1.0)?.powf(-rq_alpha)?,
        KernelFamily::Matern12 | KernelFamily::Matern32 | KernelFamily::Matern52 => {
            let r = d2.clamp_min(R2_FLOOR)?.sqrt()?;
            match family {
                KernelFamily::Matern12 => r.neg()?.exp()?,
                KernelFamily::Matern32 => {
                    let s = r.scale(3f64.sqrt())?;
                    s.add_scalar(1.0)?.mul(s.neg()?.exp()?)?
                }
                _ => {
                    let s = r.scale(5f64.sqrt())?;
                    let poly = s.add_scalar(1.0)?.add(d2.scale(5.0 / 3.0)?)?;
                    poly.mul(s.neg()?.exp()?)?
                }
            }
        }
    };
    Ok(shape.mul(outputscale)?)
}

/// Gram matrix off the tape.
pub fn kernel_eval(cfg: &KernelConfig, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let g = Graph::new();
    let k = kernel_var(
        cfg.family,
        cfg.rq_alpha,
        g.constant(a.clone()),
        g.constant(b.clone()),
        g.scalar(cfg.lengthscale),
        g.scalar(cfg.outputscale),
    )?;
    Ok(k.value().as_ref().clone())
}

/// K-means centroids (seeded init from distinct sample points, 10 Lloyd
/// iterations). Empty clusters keep their previous centroid.
pub fn init_inducing(z: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (m, h) = z.dims2()?;
    if k == 0 || m < k {
        return Err(Error::Config(format!("need at least {k} embeddings for {k} inducing points, got {m}")));
    }
    let mut r = rng::stream(seed, "init_inducing");
    let idx = sample(&mut r, m, k).into_vec();
    let mut centers = z.select_rows(&idx);
    let mut assign = vec![0usize; m];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            let p = z.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d: f64 = p.iter().zip(centers.row(c)).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![0.0; k * h];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * h..(c + 1) * h].iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..h {
                    centers.set2(c, j, sums[c * h + j] / counts[c] as f64);
                }
            }
        }
    }
    Ok(centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHead {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub family: KernelFamily,
    pub rq_alpha: f64,
    /// `K×H` inducing locations.
    pub inducing: Tensor,
    /// Whitened variational means, one column per class (`K×C`).
    pub var_mean: Tensor,
    /// Unconstrained Cholesky factors, one `K×K` per class; the strict lower
    /// triangle is used as is and the diagonal through softplus.
    pub var_chol_raw: Vec<Tensor>,
    pub lengthscale_raw: Tensor,
    pub outputscale_raw: Tensor,
    /// Whether inducing locations have been placed on real embeddings.
    pub inducing_initialized: bool,
}

/// Marginal predictive moments on the tape.
pub struct GpMoments<'g> {
    pub mu: Var<'g>,
    pub var: Var<'g>,
    pub kl: Var<'g>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mu: Tensor,
    pub var: Tensor,
    pub probs: Tensor,
}

/// Smallest raw value whose softplus is exactly 1, so the initial factor is
/// exactly the identity.
fn unit_softplus_raw() -> f64 {
    let mut r = softplus_inverse(1.0);
    while softplus(r) < 1.0 {
        r = r.next_up();
    }
    while softplus(r.next_down()) >= 1.0 {
        r = r.next_down();
    }
    r
}

impl GpHead {
    /// Whitened prior start (`m = 0`, `S = I`), inducing points drawn from a
    /// standard normal until [`GpHead::set_inducing`] places them.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        num_classes: usize,
        num_inducing: usize,
        kernel: &KernelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        kernel.validate()?;
        if num_inducing == 0 || num_classes == 0 {
            return Err(Error::Config("GP head needs inducing points and classes".into()));
        }
        let inducing = Tensor::new(
            vec![num_inducing, latent_dim],
            (0..num_inducing * latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
        )?;
        let mut chol = Tensor::zeros(&[num_inducing, num_inducing]);
        let d = unit_softplus_raw();
        for i in 0..num_inducing {
            chol.set2(i, i, d);
        }
        Ok(Self {
            latent_dim,
            num_classes,
            family: kernel.family,
            rq_alpha: kernel.rq_alpha,
            inducing,
            var_mean: Tensor::zeros(&[num_inducing, num_classes]),
            var_chol_raw: vec![chol; num_classes],
            lengthscale_raw: Tensor::from_vec(vec![softplus_inverse(kernel.lengthscale)]),
            outputscale_raw: Tensor::from_vec(vec![softplus_inverse(kernel.outputscale)]),
            inducing_initialized: false,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.shape()[0]
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            family: self.family,
            lengthscale: softplus(self.lengthscale_raw.data()[0]),
            outputscale: softplus(self.outputscale_raw.data()[0]),
            rq_alpha: self.rq_alpha,
        }
    }

    pub fn set_inducing(&mut self, z: Tensor) -> Result<()> {
        if z.shape() != self.inducing.shape() {
            return Err(Error::Shape(format!("inducing {:?} for {:?}", z.shape(), self.inducing.shape())));
        }
        self.inducing = z;
        self.inducing_initialized = true;
        Ok(())
    }

    fn masks(k: usize) -> (Tensor, Tensor) {
        let mut lower = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..i {
                lower.set2(i, j, 1.0);
            }
        }
        (lower, Tensor::eye(k))
    }

    /// Per-class marginals `μ, σ²` (`N×C`) and the summed KL.
    pub fn moments<'g>(&self, z: Var<'g>, b: &mut Binding<'_, 'g>) -> Result<GpMoments<'g>> {
        let g = z.graph();
        let k = self.num_inducing();
        let zi = b.next_var();
        let m = b.next_var();
        let chols: Vec<Var<'g>> = (0..self.num_classes).map(|_| b.next_var()).collect();
        let ls = b.next_var().softplus()?;
        let os = b.next_var().softplus()?;
        if z.shape().len() != 2 || z.shape()[1] != self.latent_dim {
            return Err(Error::Shape(format!("GP head over {} dims got {:?}", self.latent_dim, z.shape())));
        }

        let kzz = kernel_var(self.family, self.rq_alpha, zi, zi, ls, os)?;
        let (lzz, _) = kzz.cholesky(JITTER_START)?;
        let kzx = kernel_var(self.family, self.rq_alpha, zi, z, ls, os)?;
        let a = lzz.solve_lower(kzx)?; // K×N
        let mu = a.transpose()?.matmul(m)?;
        let prior_var = a.square()?.sum_axis(0, false)?.neg()?.add(os)?.clamp_min(VAR_FLOOR)?;

        let (lower, eye) = Self::masks(k);
        let (lower, eye) = (g.constant(lower), g.constant(eye));
        let n = z.shape()[0];
        let mut cols = Vec::with_capacity(self.num_classes);
        let mut kl = m.square()?.sum()?;
        for raw in &chols {
            let l = raw.mul(lower)?.add(raw.softplus()?.mul(eye)?)?;
            let proj = l.transpose()?.matmul(a)?.square()?.sum_axis(0, false)?;
            cols.push(prior_var.add(proj)?.reshape(&[n, 1])?);
            let diag = raw.softplus()?.mul(eye)?.sum_axis(1, false)?;
            let frob = l.square()?.sum()?;
            let logdet = diag.ln()?.sum()?.scale(2.0)?;
            kl = kl.add(frob.sub(logdet)?.add_scalar(-(k as f64))?)?;
        }
        let var = g.concat(&cols, 1)?;
        Ok(GpMoments { mu, var, kl: kl.scale(0.5)? })
    }

    /// Negative per-sample ELBO: `−(1/N) Σ E_q[log softmax_y(f)] + KL/N_total`,
    /// with the expectation over `eps` (`S×N×C` standard normals).
    pub fn elbo_loss<'g>(
        &self,
        mom: &GpMoments<'g>,
        labels: &[usize],
        eps: &Tensor,
        n_total: usize,
    ) -> Result<Var<'g>> {
        let g = mom.mu.graph();
        let n = labels.len();
        let c = self.num_classes;
        if eps.shape().len() != 3 || eps.shape()[1] != n || eps.shape()[2] != c {
            return Err(Error::Shape(format!("noise {:?} for {n} rows and {c} classes", eps.shape())));
        }
        let s = eps.shape()[0];
        let f = mom.mu.add(mom.var.sqrt()?.mul(g.constant(eps.clone()))?)?;
        let ll = f.log_softmax(2)?.reshape(&[s * n, c])?;
        let idx: Vec<usize> = (0..s).flat_map(|_| labels.iter().copied()).collect();
        let expected = ll.pick(&idx)?.mean()?;
        Ok(expected.neg()?.add(mom.kl.scale(1.0 / n_total as f64)?)?)
    }

    /// Standard-normal reparameterization noise `S×N×C`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, samples: usize, n: usize, rng: &mut R) -> Tensor {
        let len = samples * n * self.num_classes;
        Tensor::new(vec![samples, n, self.num_classes], (0..len).map(|_| rng.sample(StandardNormal)).collect())
            .expect("shape")
    }

    /// Negative per-sample ELBO under a Gaussian likelihood with fixed noise
    /// variance; single-output regression used to check the variational
    /// machinery against exact GP regression.
    pub fn gaussian_elbo_loss<'g>(mom: &GpMoments<'g>, y: &[f64], noise_var: f64, n_total: usize) -> Result<Var<'g>> {
        let g = mom.mu.graph();
        let n = y.len();
        let target = g.constant(Tensor::new(vec![n, 1], y.to_vec())?);
        let resid = mom.mu.sub(target)?.square()?.add(mom.var)?;
        let ell =
            resid.scale(-0.5 / noise_var)?.add_scalar(-0.5 * (2.0 * std::f64::consts::PI * noise_var).ln())?.mean()?;
        Ok(ell.neg()?.add(mom.kl.scale(1.0 / n_total as f64)?)?)
    }

    pub fn predict(&self, z: &Tensor) -> Result<GpPrediction> {
        let g = Graph::new();
        let bound = Bound::new(&g, self, false);
        let mom = self.moments(g.constant(z.clone()), &mut bound.cursor())?;
        let probs = mom.mu.softmax(1)?;
        Ok(GpPrediction {
            mu: mom.mu.value().as_ref().clone(),
            var: mom.var.value().as_ref().clone(),
            probs: probs.value().as_ref().clone(),
        })
    }

    /// Softmax of the mean; only the predictive entropy is available.
    pub fn scores(&self, z: &Tensor) -> Result<UncertaintyScores> {
        let p = self.predict(z)?;
        Ok(UncertaintyScores {
            predicted_label: argmax_rows(&p.probs),
            aleatoric: None,
            epistemic: None,
            predictive: entropy_rows(&p.probs),
            probs: p.probs,
        })
    }

    pub fn kl(&self) -> Result<f64> {
        let g = Graph::new();
        let bound = Bound::new(&g, self, false);
        let z = g.constant(Tensor::zeros(&[1, self.latent_dim]));
        Ok(self.moments(z, &mut bound.cursor())?.kl.value().item())
    }
}

impl Parameterized for GpHead {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.inducing, &self.var_mean];
        p.extend(self.var_chol_raw.iter());
        p.push(&self.lengthscale_raw);
        p.push(&self.outputscale_raw);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.inducing, &mut self.var_mean];
        p.extend(self.var_chol_raw.iter_mut());
        p.push(&mut self.lengthscale_raw);
        p.push(&mut self.outputscale_raw);
        p
    }
}
