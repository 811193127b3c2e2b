//! Differentially private release of binary predictions.
//!
//! Three release paths are provided:
//!
//! - [`release_binary`]: the global-sensitivity baseline, thresholding
//!   `score + Lap(1/ε)` at 0.5.
//! - [`release_smooth_cauchy`] and [`release_smooth_laplace`]: noise scaled by
//!   a smooth-sensitivity bound `S` instead of the global sensitivity 1.
//! - [`tighter_epsilon`]: keeps the global-sensitivity noise but reports the
//!   smaller privacy loss implied by the smooth sensitivity, solved with the
//!   principal branch of the Lambert W function.
//!
//! Noise is drawn by inverse-CDF sampling from open-interval uniforms supplied
//! by the caller's generator (ChaCha8 throughout this crate).

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certifier::{find_k_prime, CertificateBundle};
use crate::error::{AgtError, Result};

/// Privacy parameters for a single prediction release.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    /// Shape of the heavy-tailed noise density `1 / (1 + |z|^g)`.
    pub g: u32,
}

impl PrivacySpec {
    /// Spec for the smooth Laplace path with `β = ε / (2 ln(2/δ))`.
    pub fn laplace(epsilon: f64, delta: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        check_delta(delta)?;
        let spec = Self {
            epsilon,
            delta,
            beta: epsilon / (2.0 * (2.0 / delta).ln()),
            g: 2,
        };
        spec.validate_laplace()?;
        Ok(spec)
    }

    /// Spec for the smooth Cauchy path with β just below `ε / (2(g+1))`.
    pub fn cauchy(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        let g = 2;
        let spec = Self {
            epsilon,
            delta: 0.0,
            beta: epsilon / (2.0 * (g as f64 + 1.0)) * (1.0 - 1e-6),
            g,
        };
        spec.validate_cauchy()?;
        Ok(spec)
    }

    pub fn validate_laplace(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        check_delta(self.delta)?;
        let limit = self.epsilon / (2.0 * (2.0 / self.delta).ln());
        if !(self.beta > 0.0 && self.beta <= limit) {
            return Err(AgtError::config(format!(
                "smooth Laplace release needs 0 < beta <= {limit}, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn validate_cauchy(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.g != 2 {
            return Err(AgtError::config(format!(
                "only g = 2 (standard Cauchy noise) is supported, got {}",
                self.g
            )));
        }
        let limit = self.epsilon / (2.0 * (self.g as f64 + 1.0));
        if !(self.beta > 0.0 && self.beta < limit) {
            return Err(AgtError::config(format!(
                "smooth Cauchy release needs 0 < beta < {limit}, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(AgtError::config(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AgtError::config(format!(
            "delta must lie in (0, 1), got {delta}"
        )))
    }
}

fn check_sensitivity(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(AgtError::config(format!(
            "smooth sensitivity bound must lie in [0, 1], got {s}"
        )))
    }
}

/// Laplace(0, scale) by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Standard Cauchy by inverse CDF, `tan(π(u - 1/2))`.
pub fn sample_cauchy<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    (std::f64::consts::PI * (u - 0.5)).tan()
}

/// Label released from a noisy score.
pub fn threshold(noisy: f64) -> usize {
    usize::from(noisy > 0.5)
}

/// Global-sensitivity release: 1 if `score + Lap(1/ε) > 0.5`, else 0.
pub fn release_binary<R: Rng + ?Sized>(score: f64, epsilon: f64, rng: &mut R) -> Result<usize> {
    check_epsilon(epsilon)?;
    Ok(threshold(score + sample_laplace(rng, 1.0 / epsilon)))
}

/// `score + (2(g+1) S / ε) η` with `η ~ Cauchy(1)`.
pub fn release_smooth_cauchy<R: Rng + ?Sized>(
    score: f64,
    sensitivity: f64,
    spec: &PrivacySpec,
    rng: &mut R,
) -> Result<f64> {
    spec.validate_cauchy()?;
    check_sensitivity(sensitivity)?;
    let scale = 2.0 * (spec.g as f64 + 1.0) * sensitivity / spec.epsilon;
    if scale == 0.0 {
        return Ok(score);
    }
    Ok(score + scale * sample_cauchy(rng))
}

/// `score + (2 S / ε) η` with `η ~ Lap(1)`.
pub fn release_smooth_laplace<R: Rng + ?Sized>(
    score: f64,
    sensitivity: f64,
    spec: &PrivacySpec,
    rng: &mut R,
) -> Result<f64> {
    spec.validate_laplace()?;
    check_sensitivity(sensitivity)?;
    let scale = 2.0 * sensitivity / spec.epsilon;
    if scale == 0.0 {
        return Ok(score);
    }
    Ok(score + sample_laplace(rng, scale))
}

/// Principal branch of the Lambert W function for `x ≥ 0`: the `w ≥ 0`
/// with `w e^w = x`. Halley iteration from `ln(1 + x)`.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(AgtError::Domain(format!(
            "lambert_w0 needs x >= 0, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = x.ln_1p();
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        let next = w - step;
        if (next - w).abs() <= 4.0 * f64::EPSILON * next.abs() {
            w = next;
            break;
        }
        w = next;
    }
    // One Newton polish removes the last-ulp error Halley can leave behind.
    let ew = w.exp();
    let polished = w - (w * ew - x) / (ew * (w + 1.0));
    let residual = |v: f64| (v * v.exp() - x).abs();
    Ok(if residual(polished) < residual(w) {
        polished
    } else {
        w
    })
}

/// Result of tightened accounting for one released prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingResult {
    pub eps_s: f64,
    pub k_star: usize,
    pub delta: f64,
}

/// Privacy loss of a `score + Lap(1/ε)` release measured through smooth
/// sensitivity: `ε^S = (ln(2/δ) / k*) · W0(2 ε k* / ln(2/δ))`, valid at `(ε^S, δ)`.
pub fn tighter_epsilon(epsilon: f64, delta: f64, k_star: usize) -> Result<AccountingResult> {
    check_epsilon(epsilon)?;
    check_delta(delta)?;
    if k_star == 0 {
        return Err(AgtError::Domain("k* must be at least 1".into()));
    }
    let l = (2.0 / delta).ln();
    let k = k_star as f64;
    let eps_s = l / k * lambert_w0(2.0 * epsilon * k / l)?;
    Ok(AccountingResult {
        eps_s,
        k_star,
        delta,
    })
}

/// Lower bound on the first uncertified `k` at `x`: `k' + 1`, or 1 when even
/// the smallest ladder entry is uncertified.
pub fn k_star_from_bundle(bundle: &CertificateBundle, x: &ndarray::Array1<f64>) -> Result<usize> {
    Ok(find_k_prime(bundle, x)?.map_or(1, |k| k + 1))
}
