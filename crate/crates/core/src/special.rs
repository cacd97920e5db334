//! Normal distribution helpers and the closed-form laws used as references.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn norm_sf(x: f64) -> f64 {
    norm_cdf(-x)
}

/// `ln(1 - Φ(x))`, accurate far into the upper tail.
pub fn ln_norm_sf(x: f64) -> f64 {
    if x < 30.0 {
        return norm_sf(x).ln();
    }
    // Mills ratio expansion; the first omitted term is below 1e-12 here.
    let z = 1.0 / (x * x);
    let series = 1.0 - z * (1.0 - 3.0 * z * (1.0 - 5.0 * z * (1.0 - 7.0 * z)));
    -0.5 * x * x - x.ln() - LN_SQRT_2PI + series.ln()
}

/// `ln Φ(x)`.
pub fn ln_norm_cdf(x: f64) -> f64 {
    ln_norm_sf(-x)
}

/// Fréchet distribution function `exp(-u^{-α})` on `u > 0`.
pub fn frechet_cdf(alpha: f64, u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        (-u.powf(-alpha)).exp()
    }
}

/// Distribution function of the positive 1/2-stable law with Laplace
/// transform `exp(-Γ(1/2)·√s)`.
///
/// This is a Lévy law with scale `π/2`, so `P[X ≤ x] = erfc(√(π/(4x)))`.
pub fn half_stable_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        erfc((PI / (4.0 * x)).sqrt())
    }
}
