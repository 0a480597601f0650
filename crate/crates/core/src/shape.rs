//! Fourier boundary of a primitive.
//!
//! The boundary radius at angle `θ` is `R · |Σ_k c_k e^{ikθ}|` with complex
//! coefficients `c_k = r̄_k e^{iφ_k}`. The normalized amplitudes `r̄_k` come from
//! the squared-ℓ1 normalization of the raw amplitudes, so they sum to one and the
//! boundary never leaves the circumscribed circle of radius `R`.
//!
//! Evaluation uses the Horner recurrence on `w = (cos θ, sin θ)`, which needs no
//! transcendental calls once `w` is known.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added to the softplus of the raw sharpness.
pub const SIGMA_EPS: f64 = 1e-3;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierShape {
    /// `ln R`.
    pub circumradius_raw: f64,
    pub amplitudes_raw: Vec<f64>,
    /// Radians, taken mod 2π.
    pub phases: Vec<f64>,
    /// `σ = softplus(sharpness_raw) + SIGMA_EPS`.
    pub sharpness_raw: f64,
    /// Normalization denominator kept by truncation so retained terms stay unchanged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frozen_norm: Option<f64>,
}

impl FourierShape {
    pub fn new(
        circumradius_raw: f64,
        amplitudes_raw: Vec<f64>,
        phases: Vec<f64>,
        sharpness_raw: f64,
    ) -> Self {
        assert_eq!(amplitudes_raw.len(), phases.len(), "amplitude/phase count mismatch");
        assert!(!amplitudes_raw.is_empty(), "a shape needs at least one frequency");
        Self { circumradius_raw, amplitudes_raw, phases, sharpness_raw, frozen_norm: None }
    }

    /// A circle of radius `radius` with `k` stored frequencies (only the DC term set).
    pub fn circle(radius: f64, k: usize, sigma: f64) -> Self {
        let mut amps = vec![0.0; k];
        amps[0] = 1.0;
        Self::new(radius.ln(), amps, vec![0.0; k], inverse_softplus(sigma - SIGMA_EPS))
    }

    pub fn frequencies(&self) -> usize {
        self.amplitudes_raw.len()
    }

    pub fn radius(&self) -> f64 {
        self.circumradius_raw.exp()
    }

    pub fn sharpness(&self) -> f64 {
        softplus(self.sharpness_raw) + SIGMA_EPS
    }

    /// True when this shape was produced by [`truncate_shape`].
    pub fn is_truncated(&self) -> bool {
        self.frozen_norm.is_some()
    }

    /// Normalization denominator `Σ raw²` (or the value frozen at truncation).
    pub fn norm_denominator(&self) -> f64 {
        self.frozen_norm.unwrap_or_else(|| sum_of_squares(&self.amplitudes_raw))
    }

    /// Normalized amplitudes `r̄_k`.
    pub fn normalized_amplitudes(&self) -> Result<Vec<f64>> {
        match self.frozen_norm {
            None => normalize_amplitudes(&self.amplitudes_raw),
            Some(s) => Ok(self.amplitudes_raw.iter().map(|a| a * a / s).collect()),
        }
    }

    /// Complex coefficients `c_k`; a degenerate shape falls back to the DC-only circle.
    pub fn coefficients(&self) -> Vec<Complex64> {
        let amps = self.normalized_amplitudes().unwrap_or_else(|_| {
            let mut dc = vec![0.0; self.frequencies()];
            dc[0] = 1.0;
            dc
        });
        amps.iter()
            .zip(&self.phases)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect()
    }
}

fn sum_of_squares(raw: &[f64]) -> f64 {
    raw.iter().map(|a| a * a).sum()
}

/// Squared-ℓ1 normalization `r̄_k = raw_k² / Σ raw²`.
pub fn normalize_amplitudes(raw: &[f64]) -> Result<Vec<f64>> {
    let s = sum_of_squares(raw);
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateShape);
    }
    Ok(raw.iter().map(|a| a * a / s).collect())
}

/// `Σ_k coeffs[k] w^k` by Horner's rule, highest coefficient first.
#[inline]
pub fn horner(coeffs: &[Complex64], w: Complex64) -> Complex64 {
    match coeffs.split_last() {
        None => Complex64::new(0.0, 0.0),
        Some((&top, rest)) => rest.iter().rev().fold(top, |z, &c| z * w + c),
    }
}

/// Boundary radius `r(θ)` in world units, from `cos θ` / `sin θ`.
///
/// Only the first `k_active` coefficients take part; normalization still uses
/// every stored amplitude.
pub fn boundary_radius(shape: &FourierShape, cos_theta: f64, sin_theta: f64, k_active: usize) -> f64 {
    let k = k_active.clamp(1, shape.frequencies());
    let coeffs = shape.coefficients();
    shape.radius() * horner(&coeffs[..k], Complex64::new(cos_theta, sin_theta)).norm()
}

/// Direct summation of the boundary polynomial with per-term `sin`/`cos`.
pub fn boundary_radius_naive(shape: &FourierShape, theta: f64, k_active: usize) -> f64 {
    let k = k_active.clamp(1, shape.frequencies());
    let amps = shape.coefficients();
    let (mut re, mut im) = (0.0, 0.0);
    for (j, c) in amps.iter().take(k).enumerate() {
        let (amp, phase) = c.to_polar();
        let angle = j as f64 * theta + phase;
        re += amp * angle.cos();
        im += amp * angle.sin();
    }
    shape.radius() * re.hypot(im)
}

/// Drop every frequency at or above `k_prime`.
///
/// Retained normalized amplitudes are left exactly as they were: the
/// normalization denominator of the full shape is frozen into the result.
pub fn truncate_shape(shape: &FourierShape, k_prime: usize) -> FourierShape {
    let k_prime = k_prime.clamp(1, shape.frequencies());
    let mut out = shape.clone();
    if k_prime == shape.frequencies() {
        return out;
    }
    out.frozen_norm = Some(shape.norm_denominator());
    for a in &mut out.amplitudes_raw[k_prime..] {
        *a = 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn shape_from(amps: &[f64], phases: &[f64], radius: f64) -> FourierShape {
        FourierShape::new(radius.ln(), amps.to_vec(), phases.to_vec(), 0.0)
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_amplitudes(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(n, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let n = normalize_amplitudes(&[2.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((n[0] - 0.8).abs() < 1e-15 && (n[1] - 0.2).abs() < 1e-15);
        assert!(matches!(normalize_amplitudes(&[0.0; 6]), Err(Error::DegenerateShape)));
    }

    #[test]
    fn degenerate_shape_uses_dc_circle() {
        let s = shape_from(&[0.0; 4], &[0.3; 4], 1.5);
        assert!((boundary_radius(&s, 0.3, 0.7_f64.sqrt(), 4) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn single_frequency_is_a_circle() {
        let s = shape_from(&[3.0], &[1.0], 2.0);
        for t in [0.0, 1.0, 2.5, 4.0] {
            assert!((boundary_radius(&s, f64::cos(t), f64::sin(t), 1) - 2.0).abs() < 1e-12);
            assert!((boundary_radius_naive(&s, t, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_term_closed_form() {
        let s = shape_from(&[1.0, 1.0], &[0.0, 0.0], 1.0);
        assert!((boundary_radius(&s, 1.0, 0.0, 2) - 1.0).abs() < 1e-12);
        assert!(boundary_radius(&s, -1.0, 0.0, 2).abs() < 1e-12);
        for i in 0..64 {
            let t = i as f64 * TAU / 64.0;
            let expected = (t / 2.0).cos().abs();
            assert!((boundary_radius(&s, t.cos(), t.sin(), 2) - expected).abs() < 1e-12);
            assert!((boundary_radius_naive(&s, t, 2) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_periodicity() {
        let a = shape_from(&[1.0, 0.4, 0.3], &[0.2, 1.1, -0.7], 1.3);
        let b = shape_from(&[1.0, 0.4, 0.3], &[0.2 + TAU, 1.1 - TAU, -0.7 + 2.0 * TAU], 1.3);
        for i in 0..32 {
            let t = i as f64 * 0.3;
            assert!((boundary_radius_naive(&a, t, 3) - boundary_radius_naive(&b, t, 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_retained_terms() {
        let s = shape_from(&[1.0, 0.5, 0.3, 0.2, 0.1, 0.4], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1.7);
        assert_eq!(truncate_shape(&s, 6), s);
        let t1 = truncate_shape(&s, 1);
        let rbar = s.normalized_amplitudes().unwrap();
        for th in [0.0, 1.0, 3.0] {
            let r = boundary_radius(&t1, f64::cos(th), f64::sin(th), 6);
            assert!((r - 1.7 * rbar[0]).abs() < 1e-12);
        }
        let t3 = truncate_shape(&s, 3);
        let full = s.coefficients();
        let tr = t3.coefficients();
        assert_eq!(&full[..3], &tr[..3]);
        assert!(tr[3..].iter().all(|c| c.norm() == 0.0));
        assert_eq!(t3.phases, s.phases);
    }

    #[test]
    fn truncated_horner_is_bit_identical_to_k_active() {
        let s = shape_from(&[0.9, -0.5, 0.3, 0.2, 0.7, 0.4], &[0.1, 2.2, -0.3, 0.4, 1.5, 0.6], 0.8);
        for k in 1..=6 {
            let t = truncate_shape(&s, k);
            for i in 0..100 {
                let th = i as f64 * 0.0731;
                let a = boundary_radius(&s, th.cos(), th.sin(), k);
                let b = boundary_radius(&t, th.cos(), th.sin(), 6);
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn parseval_residual_energy() {
        let s = shape_from(&[1.0, 0.5, -0.3, 0.2, 0.1, 0.4], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1.0);
        let rbar = s.normalized_amplitudes().unwrap();
        let full = s.coefficients();
        for kp in 1..6 {
            let n = 4096;
            let mut energy = 0.0;
            for i in 0..n {
                let th = i as f64 * TAU / n as f64;
                let w = Complex64::new(th.cos(), th.sin());
                let resid = horner(&full, w) - horner(&full[..kp], w);
                energy += resid.norm_sqr();
            }
            energy /= n as f64;
            let expected: f64 = rbar[kp..].iter().map(|r| r * r).sum();
            assert!((energy - expected).abs() <= 1e-10 * expected.max(1e-12), "k'={kp}");
        }
    }

    proptest! {
        #[test]
        fn horner_matches_naive(
            amps in prop::collection::vec(-2.0f64..2.0, 6),
            phases in prop::collection::vec(-10.0f64..10.0, 6),
            log_r in -2.0f64..2.0,
            theta in -7.0f64..7.0,
            k in 1usize..=6,
        ) {
            prop_assume!(amps.iter().any(|a| a.abs() > 1e-3));
            let s = FourierShape::new(log_r, amps, phases, 0.0);
            let fast = boundary_radius(&s, theta.cos(), theta.sin(), k);
            let slow = boundary_radius_naive(&s, theta, k);
            prop_assert!((fast - slow).abs() <= 1e-9 * s.radius());
            prop_assert!(fast <= s.radius() * (1.0 + 1e-12));
        }

        #[test]
        fn normalized_sum_is_one(amps in prop::collection::vec(-5.0f64..5.0, 1..10)) {
            prop_assume!(amps.iter().any(|a| a.abs() > 1e-6));
            let n = normalize_amplitudes(&amps).unwrap();
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(n.iter().all(|&x| x >= 0.0));
        }
    }
}
