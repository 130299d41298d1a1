//! Spectral normalization and the random-feature Gaussian-process head.
//!
//! The GP head maps a hidden vector `h` to random Fourier features
//! `φ_i = sqrt(2/D) cos(⟨w_i, h⟩ + b_i)` with frozen `w_i ~ N(0, I/ℓ²)` and
//! `b_i ~ U(0, 2π)`, and emits logits `β φ`. A Laplace-style precision matrix
//! over the features is accumulated with momentum after training; at
//! inference the shared predictive variance `φᵀ P⁻¹ φ` shrinks the logits by
//! the mean-field rule `logit / sqrt(1 + λ σ²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, cholesky, dot, norm, solve_lower, Matrix};
use crate::rng::Rng;

use super::SngpConfig;

/// Fixed seed for the power-iteration start vector so that
/// [`spectral_normalize`] is a pure function.
const POWER_ITERATION_SEED: u64 = 0x5eed_5eed;
const MAX_POWER_ITERS: usize = 2000;
const POWER_ITER_RTOL: f64 = 1e-13;

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// `start` is the initial right singular vector guess and receives the final
/// iterate, so repeated calls on a slowly changing matrix converge in a few
/// steps. At least `min_iters` iterations are run; iteration then continues
/// until the estimate changes by less than a relative `1e-13`.
pub fn spectral_norm(w: &Matrix, min_iters: usize, start: &mut Vec<f64>) -> f64 {
    if start.len() != w.cols() || norm(start) == 0.0 {
        let mut rng = Rng::new(POWER_ITERATION_SEED);
        *start = (0..w.cols()).map(|_| rng.normal()).collect();
    }
    let n0 = norm(start);
    start.iter_mut().for_each(|x| *x /= n0);

    let mut sigma = 0.0;
    for iter in 0..MAX_POWER_ITERS {
        let u = w.matvec(start);
        let un = norm(&u);
        if un == 0.0 {
            return 0.0;
        }
        let v = w.t_matvec(&u);
        let vn = norm(&v);
        // ‖Wᵀu‖ / ‖u‖ with u = Wv is a lower bound on σ_max that increases
        // monotonically under power iteration.
        let estimate = vn / un;
        *start = v.into_iter().map(|x| x / vn).collect();
        let converged = (estimate - sigma).abs() <= POWER_ITER_RTOL * estimate;
        sigma = estimate;
        if iter + 1 >= min_iters && converged {
            break;
        }
    }
    sigma
}

/// Rescales `w` so its spectral norm is at most `bound`. Matrices already
/// within the bound are returned unchanged; otherwise every entry is divided
/// by the same factor.
pub fn spectral_normalize(w: &Matrix, bound: f64, power_iters: usize) -> Matrix {
    let mut start = Vec::new();
    normalize_in_place(w.clone(), bound, power_iters, &mut start)
}

pub(crate) fn normalize_in_place(
    mut w: Matrix,
    bound: f64,
    power_iters: usize,
    start: &mut Vec<f64>,
) -> Matrix {
    let sigma = spectral_norm(&w, power_iters.max(1), start);
    if sigma > bound {
        w.scale(bound / sigma);
    }
    w
}

pub(crate) fn cos_features(proj: &[f64]) -> Vec<f64> {
    let scale = (2.0 / proj.len() as f64).sqrt();
    proj.iter().map(|p| scale * p.cos()).collect()
}

/// `φ_i = sqrt(2/D) cos(⟨w_i, h⟩ + b_i)` for the rows `w_i` of `w_r`.
pub fn gp_features(h: &[f64], w_r: &Matrix, b_r: &[f64]) -> Vec<f64> {
    let mut proj = w_r.matvec(h);
    axpy(1.0, b_r, &mut proj);
    cos_features(&proj)
}

/// `m · P + (1 − m) · mean_b(φ_b φ_bᵀ + ridge · I)`.
///
/// The result is exactly symmetric when `precision` is.
pub fn update_precision(precision: &Matrix, phis: &[Vec<f64>], momentum: f64, ridge: f64) -> Matrix {
    let mut out = precision.clone();
    if phis.is_empty() {
        return out;
    }
    let d = precision.rows();
    let mut batch = Matrix::zeros(d, d);
    for phi in phis {
        batch.add_outer(1.0, phi, phi);
    }
    let w = 1.0 / phis.len() as f64;
    batch.scale(w);
    for i in 0..d {
        batch[(i, i)] += ridge;
    }
    out.scale(momentum);
    out.add_scaled(1.0 - momentum, &batch);
    out
}

/// `logit_i / sqrt(1 + λ σ²_i)`.
pub fn mean_field_logits(logits: &[f64], variances: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if logits.len() != variances.len() {
        return Err(Error::Numerical(format!(
            "{} logits but {} variances",
            logits.len(),
            variances.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Numerical(format!("negative predictive variance {v}")));
    }
    if lambda == 0.0 {
        return Ok(logits.to_vec());
    }
    Ok(logits
        .iter()
        .zip(variances)
        .map(|(l, v)| l / (1.0 + lambda * v).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SngpState {
    /// `D × d'`, frozen.
    pub w_r: Matrix,
    /// `D`, frozen.
    pub b_r: Vec<f64>,
    /// `|V| × D`, trained.
    pub beta: Matrix,
    /// `D × D`, symmetric positive definite.
    pub precision: Matrix,
    pub covariance_valid: bool,
    pub mean_field_factor: f64,
    #[serde(skip)]
    factor: Option<Matrix>,
}

impl SngpState {
    pub fn new(rng: &mut Rng, hidden_dim: usize, vocab_size: usize, cfg: &SngpConfig) -> Self {
        let d = cfg.rff_dim;
        let inv_scale = 1.0 / cfg.kernel_scale;
        let w_r = Matrix::from_fn(d, hidden_dim, |_, _| rng.normal() * inv_scale);
        let b_r = (0..d).map(|_| rng.uniform(0.0, std::f64::consts::TAU)).collect();
        let beta = Matrix::from_fn(vocab_size, d, |_, _| rng.uniform(-0.1, 0.1));
        Self {
            w_r,
            b_r,
            beta,
            precision: Matrix::identity(d),
            covariance_valid: false,
            mean_field_factor: cfg.mean_field_factor,
            factor: None,
        }
    }

    pub fn rff_dim(&self) -> usize {
        self.b_r.len()
    }

    pub fn features(&self, h: &[f64]) -> Vec<f64> {
        gp_features(h, &self.w_r, &self.b_r)
    }

    pub fn reset_precision(&mut self) {
        self.precision = Matrix::identity(self.rff_dim());
        self.covariance_valid = false;
        self.factor = None;
    }

    pub fn update_precision(&mut self, phis: &[Vec<f64>], momentum: f64, ridge: f64) {
        self.precision = update_precision(&self.precision, phis, momentum, ridge);
        self.covariance_valid = false;
        self.factor = None;
    }

    /// Factorizes the precision matrix so variances can be evaluated.
    pub fn finalize(&mut self) -> Result<()> {
        self.factor = Some(cholesky(&self.precision)?);
        self.covariance_valid = true;
        Ok(())
    }

    /// Predictive variance `φᵀ P⁻¹ φ`, computed by a triangular solve against
    /// the Cholesky factor of `P`.
    pub fn variance(&self, phi: &[f64]) -> Result<f64> {
        let owned;
        let l = match &self.factor {
            Some(l) => l,
            None => {
                owned = cholesky(&self.precision)?;
                &owned
            }
        };
        let y = solve_lower(l, phi);
        Ok(dot(&y, &y))
    }
}
