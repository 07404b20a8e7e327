//! Linear contextual policies.
//!
//! Two posteriors per model unit (an arm, or a single shared model over
//! slot-option features):
//!
//! - [`RlsState`]: recursive least squares with unit observation noise and a
//!   `prior_variance · I` Gaussian prior. Equivalent to ridge regression with
//!   `λ = 1 / prior_variance`.
//! - [`BlrState`]: Bayesian logistic regression with a diagonal Laplace
//!   approximation. Each batch finds the posterior mode by damped Newton, then
//!   adds the observed Fisher information to the diagonal precision.
//!
//! Action selection on top: Thompson sampling, epsilon greedy and inverse gap
//! weighting ([`igw_distribution`]).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::linalg::{self, argmax, dot, sigmoid, softplus};

/// Gradient-norm threshold for the logistic mode search.
pub const BLR_TOLERANCE: f64 = 1e-6;
/// Iteration cap for the logistic mode search.
pub const BLR_MAX_ITERATIONS: usize = 500;

fn check_dim(expected: usize, x: &[f64]) -> Result<(), PolicyError> {
    if x.len() != expected {
        return Err(PolicyError::DimensionMismatch {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

// ── Recursive least squares ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsArm {
    pub arm: String,
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub dim: usize,
    pub arms: Vec<RlsArm>,
}

impl RlsState {
    pub fn new<S: AsRef<str>>(arm_ids: &[S], dim: usize, prior_variance: f64) -> Self {
        Self {
            dim,
            arms: arm_ids
                .iter()
                .map(|a| RlsArm {
                    arm: a.as_ref().to_string(),
                    mean: vec![0.0; dim],
                    cov: linalg::identity_scaled(dim, prior_variance),
                })
                .collect(),
        }
    }

    fn arm(&self, arm: usize) -> Result<&RlsArm, PolicyError> {
        self.arms.get(arm).ok_or(PolicyError::UnknownArm(arm))
    }

    /// `m_aᵀ x`.
    pub fn predict(&self, arm: usize, x: &[f64]) -> Result<f64, PolicyError> {
        check_dim(self.dim, x)?;
        Ok(dot(&self.arm(arm)?.mean, x))
    }

    /// `xᵀ P_a x`, the posterior variance of the score.
    pub fn score_variance(&self, arm: usize, x: &[f64]) -> Result<f64, PolicyError> {
        check_dim(self.dim, x)?;
        Ok(linalg::quad_form(&self.arm(arm)?.cov, self.dim, x).max(0.0))
    }

    /// Draw of `w̃ᵀx` with `w̃ ~ N(m_a, P_a)`, sampled directly in score space.
    pub fn sample_score<R: Rng + ?Sized>(&self, arm: usize, x: &[f64], rng: &mut R) -> Result<f64, PolicyError> {
        let mean = self.predict(arm, x)?;
        let sd = self.score_variance(arm, x)?.sqrt();
        let z: f64 = StandardNormal.sample(rng);
        Ok(mean + sd * z)
    }

    /// Full coefficient draw `w̃ ~ N(m_a, P_a)`.
    pub fn sample_weights<R: Rng + ?Sized>(&self, arm: usize, rng: &mut R) -> Result<Vec<f64>, PolicyError> {
        let a = self.arm(arm)?;
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let l = match linalg::cholesky(&a.cov, d) {
            Some(l) => l,
            None => {
                // numerically semidefinite; jitter the diagonal
                let mut c = a.cov.clone();
                let trace: f64 = (0..d).map(|i| c[i * d + i]).sum::<f64>() / d.max(1) as f64;
                for i in 0..d {
                    c[i * d + i] += 1e-12 * trace.max(1e-300);
                }
                linalg::cholesky(&c, d).ok_or(PolicyError::NonFiniteInput)?
            }
        };
        Ok(linalg::affine_lower(&a.mean, &l, d, &z))
    }

    /// Rank-1 RLS update with unit observation noise.
    pub fn update(&mut self, arm: usize, x: &[f64], y: f64) -> Result<(), PolicyError> {
        check_dim(self.dim, x)?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteInput);
        }
        let d = self.dim;
        let a = self
            .arms
            .get_mut(arm)
            .ok_or(PolicyError::UnknownArm(arm))?;
        let px = linalg::mat_vec(&a.cov, d, x);
        let denom = 1.0 + dot(x, &px);
        if denom == 1.0 && px.iter().all(|v| *v == 0.0) {
            return Ok(());
        }
        let gain: Vec<f64> = px.iter().map(|v| v / denom).collect();
        let residual = y - dot(&a.mean, x);
        for (m, k) in a.mean.iter_mut().zip(&gain) {
            *m += k * residual;
        }
        // P ← P − k (P x)ᵀ, using xᵀP = (P x)ᵀ for symmetric P
        for i in 0..d {
            let ki = gain[i];
            if ki == 0.0 {
                continue;
            }
            let row = &mut a.cov[i * d..(i + 1) * d];
            for (c, p) in row.iter_mut().zip(&px) {
                *c -= ki * p;
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (a.cov[i * d + j] + a.cov[j * d + i]);
                a.cov[i * d + j] = s;
                a.cov[j * d + i] = s;
            }
        }
        Ok(())
    }
}

// ── Bayesian logistic regression ────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrArm {
    pub arm: String,
    pub mean: Vec<f64>,
    /// Diagonal precision.
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrState {
    pub dim: usize,
    pub arms: Vec<BlrArm>,
}

/// Result of one Laplace update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlrFit {
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn signed_label(y: f64) -> Result<f64, PolicyError> {
    if y == 1.0 {
        Ok(1.0)
    } else if y == 0.0 {
        Ok(-1.0)
    } else {
        Err(PolicyError::NonBinaryLabel(y))
    }
}

/// `Σ_j q_j/2 (w_j − m_j)² + Σ_i log(1 + exp(−y'_i wᵀx_i))`, labels in {0, 1}.
pub fn blr_objective(mean: &[f64], precision: &[f64], batch: &[(&[f64], f64)], w: &[f64]) -> f64 {
    let prior: f64 = w
        .iter()
        .zip(mean)
        .zip(precision)
        .map(|((w, m), q)| 0.5 * q * (w - m) * (w - m))
        .sum();
    let data: f64 = batch
        .iter()
        .map(|(x, y)| {
            let s = if *y == 1.0 { 1.0 } else { -1.0 };
            softplus(-s * dot(w, x))
        })
        .sum();
    prior + data
}

/// Analytic gradient of [`blr_objective`].
pub fn blr_gradient(mean: &[f64], precision: &[f64], batch: &[(&[f64], f64)], w: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = w
        .iter()
        .zip(mean)
        .zip(precision)
        .map(|((w, m), q)| q * (w - m))
        .collect();
    for (x, y) in batch {
        let s = if *y == 1.0 { 1.0 } else { -1.0 };
        let c = s * sigmoid(-s * dot(w, x));
        for (gj, xj) in g.iter_mut().zip(x.iter()) {
            *gj -= c * xj;
        }
    }
    g
}

impl BlrState {
    pub fn new<S: AsRef<str>>(arm_ids: &[S], dim: usize, prior_variance: f64) -> Self {
        Self {
            dim,
            arms: arm_ids
                .iter()
                .map(|a| BlrArm {
                    arm: a.as_ref().to_string(),
                    mean: vec![0.0; dim],
                    precision: vec![1.0 / prior_variance; dim],
                })
                .collect(),
        }
    }

    fn arm(&self, arm: usize) -> Result<&BlrArm, PolicyError> {
        self.arms.get(arm).ok_or(PolicyError::UnknownArm(arm))
    }

    pub fn logit(&self, arm: usize, x: &[f64]) -> Result<f64, PolicyError> {
        check_dim(self.dim, x)?;
        Ok(dot(&self.arm(arm)?.mean, x))
    }

    /// `σ(m_aᵀ x)`.
    pub fn predict_proba(&self, arm: usize, x: &[f64]) -> Result<f64, PolicyError> {
        Ok(sigmoid(self.logit(arm, x)?))
    }

    /// Draw of the logit `w̃ᵀx` with `w̃ ~ N(m_a, diag(1/q_a))`.
    pub fn sample_logit<R: Rng + ?Sized>(&self, arm: usize, x: &[f64], rng: &mut R) -> Result<f64, PolicyError> {
        check_dim(self.dim, x)?;
        let a = self.arm(arm)?;
        let mut mean = 0.0;
        let mut var = 0.0;
        for ((xj, m), q) in x.iter().zip(&a.mean).zip(&a.precision) {
            if *xj != 0.0 {
                mean += m * xj;
                var += xj * xj / q;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        Ok(mean + var.sqrt() * z)
    }

    pub fn sample_weights<R: Rng + ?Sized>(&self, arm: usize, rng: &mut R) -> Result<Vec<f64>, PolicyError> {
        let a = self.arm(arm)?;
        Ok(a.mean
            .iter()
            .zip(&a.precision)
            .map(|(m, q)| {
                let z: f64 = StandardNormal.sample(rng);
                m + z / q.sqrt()
            })
            .collect())
    }

    /// Laplace update over a whole batch for one arm.
    ///
    /// Coordinates that are zero in every batch row keep their prior mean
    /// (their gradient is identically zero), so Newton runs on the active
    /// coordinates only.
    pub fn update(&mut self, arm: usize, batch: &[(&[f64], f64)]) -> Result<BlrFit, PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let d = self.dim;
        for (x, y) in batch {
            check_dim(d, x)?;
            signed_label(*y)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFiniteInput);
            }
        }
        let a = self
            .arms
            .get_mut(arm)
            .ok_or(PolicyError::UnknownArm(arm))?;

        let active: Vec<usize> = (0..d)
            .filter(|&j| batch.iter().any(|(x, _)| x[j] != 0.0))
            .collect();
        let (w, fit) = find_mode(&a.mean, &a.precision, batch, &active)?;

        for (x, _) in batch {
            let p = sigmoid(dot(&w, x));
            let curvature = p * (1.0 - p);
            for &j in &active {
                a.precision[j] += x[j] * x[j] * curvature;
            }
        }
        a.mean = w;
        Ok(fit)
    }
}

fn find_mode(
    mean: &[f64],
    precision: &[f64],
    batch: &[(&[f64], f64)],
    active: &[usize],
) -> Result<(Vec<f64>, BlrFit), PolicyError> {
    let n = active.len();
    let mut w = mean.to_vec();
    let mut f = blr_objective(mean, precision, batch, &w);
    for iteration in 0..=BLR_MAX_ITERATIONS {
        let g = blr_gradient(mean, precision, batch, &w);
        let gnorm = linalg::norm(&g);
        if gnorm <= BLR_TOLERANCE {
            return Ok((
                w,
                BlrFit {
                    iterations: iteration,
                    gradient_norm: gnorm,
                },
            ));
        }
        if iteration == BLR_MAX_ITERATIONS {
            break;
        }
        let ga: Vec<f64> = active.iter().map(|&j| g[j]).collect();

        // Hessian restricted to the active set: diag(q) + Σ p(1−p) x xᵀ.
        let mut h = vec![0.0; n * n];
        for (r, &j) in active.iter().enumerate() {
            h[r * n + r] = precision[j];
        }
        for (x, _) in batch {
            let p = sigmoid(dot(&w, x));
            let c = p * (1.0 - p);
            for (r, &j) in active.iter().enumerate() {
                let xr = x[j] * c;
                if xr == 0.0 {
                    continue;
                }
                for (s, &k) in active.iter().enumerate() {
                    h[r * n + s] += xr * x[k];
                }
            }
        }
        let direction: Vec<f64> = match linalg::cholesky(&h, n) {
            Some(l) => linalg::cholesky_solve(&l, n, &ga).iter().map(|v| -v).collect(),
            None => ga.iter().map(|v| -v).collect(),
        };

        let mut improved = false;
        for candidate in [direction, ga.iter().map(|v| -v).collect()] {
            let mut step = 1.0;
            for _ in 0..60 {
                let mut trial = w.clone();
                for (r, &j) in active.iter().enumerate() {
                    trial[j] += step * candidate[r];
                }
                let ft = blr_objective(mean, precision, batch, &trial);
                if ft < f || (ft <= f && trial != w) {
                    w = trial;
                    f = ft;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if improved {
                break;
            }
        }
        if !improved {
            // no representable descent step left; accept if already tight
            let gnorm = linalg::norm(&blr_gradient(mean, precision, batch, &w));
            if gnorm <= BLR_TOLERANCE {
                return Ok((
                    w,
                    BlrFit {
                        iterations: iteration + 1,
                        gradient_norm: gnorm,
                    },
                ));
            }
            break;
        }
    }
    Err(PolicyError::NoConvergence {
        iterations: BLR_MAX_ITERATIONS,
    })
}

// ── Action selection ────────────────────────────────────────────────────

/// Inverse gap weighting over `scores` at exploration strength `gamma`.
///
/// The best arm `b` (smallest index on ties) takes the remaining mass after
/// every other arm gets `1 / (K + γ (s_b − s_a))`.
pub fn igw_distribution(scores: &[f64], gamma: f64) -> Result<Vec<f64>, PolicyError> {
    if scores.is_empty() {
        return Err(PolicyError::EmptyArmSet);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PolicyError::NonFiniteScore);
    }
    let k = scores.len() as f64;
    let best = argmax(scores).expect("nonempty finite scores");
    let mut p: Vec<f64> = scores
        .iter()
        .map(|s| 1.0 / (k + gamma * (scores[best] - s)))
        .collect();
    p[best] = 0.0;
    let rest: f64 = p.iter().sum();
    p[best] = (1.0 - rest).max(0.0);
    Ok(p)
}

/// Exploration strength after `batches` applied training batches.
pub fn igw_gamma(gamma0: f64, batches: u64) -> f64 {
    gamma0 * ((batches + 1) as f64).sqrt()
}

/// Per-arm posterior family behind a linear policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearModel {
    Rls(RlsState),
    Blr(BlrState),
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        match self {
            LinearModel::Rls(s) => s.dim,
            LinearModel::Blr(s) => s.dim,
        }
    }

    pub fn units(&self) -> usize {
        match self {
            LinearModel::Rls(s) => s.arms.len(),
            LinearModel::Blr(s) => s.arms.len(),
        }
    }

    pub fn unit_ids(&self) -> Vec<&str> {
        match self {
            LinearModel::Rls(s) => s.arms.iter().map(|a| a.arm.as_str()).collect(),
            LinearModel::Blr(s) => s.arms.iter().map(|a| a.arm.as_str()).collect(),
        }
    }

    /// Posterior-mean expected reward: `mᵀx` (RLS) or `σ(mᵀx)` (BLR).
    pub fn mean_reward(&self, unit: usize, x: &[f64]) -> Result<f64, PolicyError> {
        match self {
            LinearModel::Rls(s) => s.predict(unit, x),
            LinearModel::Blr(s) => s.predict_proba(unit, x),
        }
    }

    /// Posterior-mean score on a monotone scale suitable for argmax (logit for BLR).
    pub fn mean_score(&self, unit: usize, x: &[f64]) -> Result<f64, PolicyError> {
        match self {
            LinearModel::Rls(s) => s.predict(unit, x),
            LinearModel::Blr(s) => s.logit(unit, x),
        }
    }

    /// Thompson draw of the score on the same scale as [`LinearModel::mean_score`].
    pub fn sample_score<R: Rng + ?Sized>(&self, unit: usize, x: &[f64], rng: &mut R) -> Result<f64, PolicyError> {
        match self {
            LinearModel::Rls(s) => s.sample_score(unit, x, rng),
            LinearModel::Blr(s) => s.sample_logit(unit, x, rng),
        }
    }

    /// Thompson draw of the full coefficient vector (shared models).
    pub fn sample_weights<R: Rng + ?Sized>(&self, unit: usize, rng: &mut R) -> Result<Vec<f64>, PolicyError> {
        match self {
            LinearModel::Rls(s) => s.sample_weights(unit, rng),
            LinearModel::Blr(s) => s.sample_weights(unit, rng),
        }
    }

    pub fn mean_weights(&self, unit: usize) -> Result<&[f64], PolicyError> {
        match self {
            LinearModel::Rls(s) => s.arms.get(unit).map(|a| a.mean.as_slice()),
            LinearModel::Blr(s) => s.arms.get(unit).map(|a| a.mean.as_slice()),
        }
        .ok_or(PolicyError::UnknownArm(unit))
    }
}

/// Thompson sampling over per-arm linear posteriors; ties to the smallest index.
pub fn linear_ts_sample<R: Rng + ?Sized>(model: &LinearModel, x: &[f64], rng: &mut R) -> Result<usize, PolicyError> {
    let scores = (0..model.units())
        .map(|a| model.sample_score(a, x, rng))
        .collect::<Result<Vec<_>, _>>()?;
    argmax(&scores).ok_or(PolicyError::EmptyArmSet)
}
