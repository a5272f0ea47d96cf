//! Small dense linear algebra on plain tensors: jittered Cholesky,
//! triangular solves and power iteration for the top singular value.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First jitter tried when a zero starting jitter fails.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-2;

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub factor: Tensor,
    /// Jitter that was actually added to the diagonal.
    pub jitter: f64,
    /// How many times the jitter had to be raised.
    pub escalations: usize,
}

fn try_cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Cholesky factorization of a symmetric matrix.
///
/// Starts from `jitter` and multiplies it by ten after every failure (a zero
/// start moves to [`JITTER_START`]) until [`JITTER_MAX`] is exceeded.
pub fn cholesky(a: &Tensor, jitter: f64) -> Result<Cholesky> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("cholesky of non-square {:?}", a.shape())));
    }
    let mut jitter = jitter.max(0.0);
    let mut escalations = 0;
    loop {
        if let Some(l) = try_cholesky(a.data(), n, jitter) {
            return Ok(Cholesky { factor: Tensor::new(vec![n, n], l)?, jitter, escalations });
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        escalations += 1;
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "matrix of order {n} not positive definite with jitter up to {JITTER_MAX:e}"
            )));
        }
    }
}

/// Solves `L X = B` for lower-triangular `L` (only the lower triangle is read).
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, _) = l.dims2()?;
    let (bn, cols) = as_matrix(b)?;
    if bn != n {
        return Err(Error::Shape(format!("solve of {:?} with rhs {:?}", l.shape(), b.shape())));
    }
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in 0..n {
        let d = ld[i * n + i];
        for k in 0..i {
            let lik = ld[i * n + k];
            if lik != 0.0 {
                for c in 0..cols {
                    x[i * cols + c] -= lik * x[k * cols + c];
                }
            }
        }
        for c in 0..cols {
            x[i * cols + c] /= d;
        }
    }
    Tensor::new(b.shape().to_vec(), x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, _) = l.dims2()?;
    let (bn, cols) = as_matrix(b)?;
    if bn != n {
        return Err(Error::Shape(format!("solve of {:?} with rhs {:?}", l.shape(), b.shape())));
    }
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        let d = ld[i * n + i];
        for k in i + 1..n {
            // (Lᵀ)[i,k] = L[k,i]
            let lki = ld[k * n + i];
            if lki != 0.0 {
                for c in 0..cols {
                    x[i * cols + c] -= lki * x[k * cols + c];
                }
            }
        }
        for c in 0..cols {
            x[i * cols + c] /= d;
        }
    }
    Tensor::new(b.shape().to_vec(), x)
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(chol: &Cholesky, b: &Tensor) -> Result<Tensor> {
    let y = solve_lower(&chol.factor, b)?;
    solve_lower_transpose(&chol.factor, &y)
}

fn as_matrix(b: &Tensor) -> Result<(usize, usize)> {
    match b.shape() {
        [n] => Ok((*n, 1)),
        [n, c] => Ok((*n, *c)),
        s => Err(Error::Shape(format!("right-hand side must be 1-D or 2-D, got {s:?}"))),
    }
}

/// Result of [`power_iteration`].
#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub sigma: f64,
    /// Updated left singular vector estimate (length `m`).
    pub u: Vec<f64>,
    /// Right singular vector estimate (length `n`).
    pub v: Vec<f64>,
}

/// Estimates the top singular value of `w` (`m x n`) from a persisted left
/// vector `u`. Each step does `v = Wᵀu/|Wᵀu|`, `u = Wv/|Wv|`; the estimate is
/// `uᵀWv`. A zero matrix yields `sigma = 0` and leaves `u` unchanged.
pub fn power_iteration(w: &Tensor, u: &[f64], steps: usize) -> Result<PowerIteration> {
    let (m, n) = w.dims2()?;
    if u.len() != m {
        return Err(Error::Shape(format!("power iteration state has {} entries, W has {m} rows", u.len())));
    }
    if steps == 0 {
        return Err(Error::Shape("power iteration needs at least one step".into()));
    }
    let wd = w.data();
    let mut u = u.to_vec();
    let mut v = vec![0.0; n];
    for _ in 0..steps {
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let ui = u[i];
            for j in 0..n {
                v[j] += wd[i * n + j] * ui;
            }
        }
        let vn = norm(&v);
        if vn == 0.0 {
            return Ok(PowerIteration { sigma: 0.0, u, v });
        }
        v.iter_mut().for_each(|x| *x /= vn);
        let mut wu = vec![0.0; m];
        for i in 0..m {
            wu[i] = (0..n).map(|j| wd[i * n + j] * v[j]).sum();
        }
        let un = norm(&wu);
        if un == 0.0 {
            return Ok(PowerIteration { sigma: 0.0, u, v });
        }
        u = wu.into_iter().map(|x| x / un).collect();
    }
    let sigma = (0..m).map(|i| u[i] * (0..n).map(|j| wd[i * n + j] * v[j]).sum::<f64>()).sum();
    Ok(PowerIteration { sigma, u, v })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}
