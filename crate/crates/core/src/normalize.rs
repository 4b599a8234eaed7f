//! Probability-normalizing maps used inside attention.
//!
//! α-entmax maps scores `z` to
//!
//! ```text
//! p_i = ReLU((α - 1) z_i - τ)^(1 / (α - 1))
//! ```
//!
//! where the threshold `τ` is the unique value making `p` sum to one. At
//! α → 1 the map recovers softmax and at α = 2 it is sparsemax, the
//! Euclidean projection onto the simplex. For α > 1 coordinates whose
//! scaled score falls at or below `τ` receive exactly zero mass.
//!
//! Two operating points (α = 1.5 and α = 2) have closed-form sort-based
//! solvers. Every other α is solved by bisection on `τ`.
//!
//! All sums over coordinates are taken in descending-score order, so the
//! outputs are exactly permutation-equivariant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual tolerance `|Σ p - 1|` the bisection solver guarantees.
pub const BISECTION_TOLERANCE: f64 = 1e-10;
pub const BISECTION_MAX_ITERS: usize = 100;
/// Step used for the finite-difference derivative of entmax in α.
pub const ALPHA_FD_STEP: f64 = 1e-4;
/// Learned α is clamped to this range before use.
pub const LEARNED_ALPHA_MIN: f64 = 1.0 + 1e-3;
pub const LEARNED_ALPHA_MAX: f64 = 2.0 - 1e-3;

/// Where an attention head's α comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaSpec {
    /// A constant α in (1, 2].
    Fixed(f64),
    /// α = 1 + sigmoid(att_scalar), with `att_scalar` trained per head.
    Learned { att_scalar: f64 },
}

impl AlphaSpec {
    pub fn fixed(value: f64) -> Result<Self> {
        if !(value > 1.0 && value <= 2.0) {
            return Err(Error::Domain(format!("fixed alpha {value} outside (1, 2]")));
        }
        Ok(AlphaSpec::Fixed(value))
    }

    /// The α actually handed to the solver: learned values are clamped away
    /// from the singular exponent at α = 1.
    pub fn effective(&self) -> f64 {
        match *self {
            AlphaSpec::Fixed(v) => v,
            AlphaSpec::Learned { .. } => alpha_of(self).clamp(LEARNED_ALPHA_MIN, LEARNED_ALPHA_MAX),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unclamped α of a spec: the fixed value, or `1 + sigmoid(att_scalar)`.
pub fn alpha_of(spec: &AlphaSpec) -> f64 {
    match *spec {
        AlphaSpec::Fixed(v) => v,
        AlphaSpec::Learned { att_scalar } => 1.0 + sigmoid(att_scalar),
    }
}

/// Result of normalizing one score vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerOutput {
    pub probs: Vec<f64>,
    /// `probs[i] > 0`.
    pub support: Vec<bool>,
    /// Entmax threshold in the unshifted score frame; 0 for softmax.
    pub tau: f64,
}

impl NormalizerOutput {
    fn from_probs(probs: Vec<f64>, tau: f64) -> Self {
        let support = probs.iter().map(|&p| p > 0.0).collect();
        NormalizerOutput {
            probs,
            support,
            tau,
        }
    }

    pub fn support_size(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }
}

fn check_scores(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::contract("cannot normalize an empty score vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite attention score".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!(
            "entmax alpha {alpha} outside (1, 2]"
        )));
    }
    Ok(())
}

/// Indices of `z` sorted by descending score, ties by index.
fn descending_order(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Divides by the total, summing in the given order.
fn renormalize(probs: &mut [f64], order: &[usize]) {
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
}

pub fn softmax(z: &[f64]) -> Result<NormalizerOutput> {
    check_scores(z)?;
    let max = max_of(z);
    let mut probs: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let order = descending_order(z);
    renormalize(&mut probs, &order);
    Ok(NormalizerOutput {
        support: vec![true; z.len()],
        probs,
        tau: 0.0,
    })
}

/// Σ_i max(0, x_i - τ)^exponent over `x` sorted descending, stopping at the
/// first inactive coordinate.
fn mass_at(sorted: &[f64], tau: f64, exponent: f64) -> f64 {
    let mut total = 0.0;
    for &x in sorted {
        let u = x - tau;
        if u <= 0.0 {
            break;
        }
        total += u.powf(exponent);
    }
    total
}

/// Bisection for τ in the frame shifted so that max (α-1)z = 0. Returns the
/// shifted threshold and its normalization residual.
fn bisect_shifted_tau(sorted_shifted: &[f64], alpha: f64) -> (f64, f64) {
    let exponent = 1.0 / (alpha - 1.0);
    // At τ = -1 the top term alone is 1; at τ = 0 the sum is 0.
    let (mut lo, mut hi) = (-1.0_f64, 0.0_f64);
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass_at(sorted_shifted, mid, exponent) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_lo = mass_at(sorted_shifted, lo, exponent) - 1.0;
    let r_hi = mass_at(sorted_shifted, hi, exponent) - 1.0;
    if r_lo.abs() <= r_hi.abs() {
        (lo, r_lo)
    } else {
        (hi, r_hi)
    }
}

fn shifted_sorted(z: &[f64], alpha: f64, order: &[usize]) -> (f64, Vec<f64>) {
    let max = z[order[0]];
    let scale = alpha - 1.0;
    (max, order.iter().map(|&i| scale * (z[i] - max)).collect())
}

/// Threshold τ with Σ max(0, (α-1)z_i - τ)^(1/(α-1)) = 1, found by bisection
/// on `[(α-1) max z - 1, (α-1) max z]`.
pub fn find_tau(z: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_scores(z)?;
    let order = descending_order(z);
    let (max, sorted) = shifted_sorted(z, alpha, &order);
    let (tau, residual) = bisect_shifted_tau(&sorted, alpha);
    debug_assert!(residual.abs() <= BISECTION_TOLERANCE, "residual {residual}");
    Ok(tau + (alpha - 1.0) * max)
}

/// α-entmax through the bisection solver, valid for every α in (1, 2].
pub fn entmax_bisect(z: &[f64], alpha: f64) -> Result<NormalizerOutput> {
    check_alpha(alpha)?;
    check_scores(z)?;
    let order = descending_order(z);
    let (max, sorted) = shifted_sorted(z, alpha, &order);
    if z.len() == 1 {
        return Ok(NormalizerOutput::from_probs(
            vec![1.0],
            (alpha - 1.0) * max - 1.0,
        ));
    }
    let (tau, _) = bisect_shifted_tau(&sorted, alpha);
    let exponent = 1.0 / (alpha - 1.0);
    let scale = alpha - 1.0;
    let mut probs: Vec<f64> = z
        .iter()
        .map(|&v| {
            let u = scale * (v - max) - tau;
            if u > 0.0 {
                u.powf(exponent)
            } else {
                0.0
            }
        })
        .collect();
    renormalize(&mut probs, &order);
    Ok(NormalizerOutput::from_probs(probs, tau + scale * max))
}

/// Exact sort-based sparsemax (α = 2).
pub fn sparsemax(z: &[f64]) -> Result<NormalizerOutput> {
    check_scores(z)?;
    let order = descending_order(z);
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let size = (k + 1) as f64;
        if 1.0 + size * z[i] > cumsum {
            tau = (cumsum - 1.0) / size;
        } else {
            break;
        }
    }
    let probs = z.iter().map(|&v| (v - tau).max(0.0)).collect();
    Ok(NormalizerOutput::from_probs(probs, tau))
}

/// Exact sort-based 1.5-entmax. With x = z/2 and support size k, τ solves
/// Σ_{i≤k} (x_i - τ)² = 1, i.e. τ = mean - sqrt((1 - ss) / k) where ss is
/// the support's sum of squared deviations.
pub fn entmax15(z: &[f64]) -> Result<NormalizerOutput> {
    check_scores(z)?;
    let order = descending_order(z);
    let max = z[order[0]];
    let x: Vec<f64> = order.iter().map(|&i| 0.5 * (z[i] - max)).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut tau_star = x[0] - 1.0;
    for (k, &xk) in x.iter().enumerate() {
        sum += xk;
        sum_sq += xk * xk;
        let size = (k + 1) as f64;
        let mean = sum / size;
        let ss = sum_sq - size * mean * mean;
        let delta = ((1.0 - ss) / size).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= xk {
            tau_star = tau;
        } else {
            break;
        }
    }
    let probs = z
        .iter()
        .map(|&v| {
            let u = 0.5 * (v - max) - tau_star;
            if u > 0.0 {
                u * u
            } else {
                0.0
            }
        })
        .collect();
    Ok(NormalizerOutput::from_probs(probs, tau_star + 0.5 * max))
}

/// α-entmax, using the exact solvers at α ∈ {1.5, 2} and bisection otherwise.
pub fn entmax(z: &[f64], alpha: f64) -> Result<NormalizerOutput> {
    check_alpha(alpha)?;
    if alpha == 2.0 {
        sparsemax(z)
    } else if alpha == 1.5 {
        entmax15(z)
    } else {
        entmax_bisect(z, alpha)
    }
}

/// Vector-Jacobian product of entmax. With `s_i = p_i^(2-α)` on the support
/// and 0 elsewhere: `grad = s ⊙ g - (⟨s, g⟩ / Σ s) s`.
pub fn entmax_backward(out: &NormalizerOutput, alpha: f64, upstream: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = out
        .probs
        .iter()
        .zip(&out.support)
        .map(|(&p, &on)| if on { p.powf(2.0 - alpha) } else { 0.0 })
        .collect();
    let s_total: f64 = s.iter().sum();
    let sg: f64 = s.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let q = sg / s_total;
    s.iter()
        .zip(upstream)
        .map(|(&si, &g)| si * g - q * si)
        .collect()
}

/// Vector-Jacobian product of softmax: `p ⊙ (g - ⟨p, g⟩)`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let pg: f64 = probs.iter().zip(upstream).map(|(a, b)| a * b).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &g)| p * (g - pg))
        .collect()
}

/// d⟨upstream, entmax(z, α)⟩ / d att_scalar for a learned head. The α
/// derivative is a central difference with step [`ALPHA_FD_STEP`] at fixed
/// `z`; it is zero where the clamp on α is active.
pub fn alpha_gradient(z: &[f64], spec: &AlphaSpec, upstream: &[f64]) -> Result<f64> {
    let AlphaSpec::Learned { att_scalar } = *spec else {
        return Err(Error::contract(
            "alpha gradient requested for a fixed-alpha head",
        ));
    };
    let raw = alpha_of(spec);
    if !(LEARNED_ALPHA_MIN..=LEARNED_ALPHA_MAX).contains(&raw) {
        return Ok(0.0);
    }
    let plus = entmax(z, raw + ALPHA_FD_STEP)?;
    let minus = entmax(z, raw - ALPHA_FD_STEP)?;
    let d_alpha: f64 = plus
        .probs
        .iter()
        .zip(&minus.probs)
        .zip(upstream)
        .map(|((a, b), g)| (a - b) / (2.0 * ALPHA_FD_STEP) * g)
        .sum();
    let s = sigmoid(att_scalar);
    Ok(d_alpha * s * (1.0 - s))
}

/// Normalizer selected for one attention head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalizer {
    Softmax,
    Entmax(f64),
}

impl Normalizer {
    pub fn apply(&self, z: &[f64]) -> Result<NormalizerOutput> {
        match *self {
            Normalizer::Softmax => softmax(z),
            Normalizer::Entmax(alpha) => entmax(z, alpha),
        }
    }

    pub fn backward(&self, out: &NormalizerOutput, upstream: &[f64]) -> Vec<f64> {
        match *self {
            Normalizer::Softmax => softmax_backward(&out.probs, upstream),
            Normalizer::Entmax(alpha) => entmax_backward(out, alpha, upstream),
        }
    }
}
