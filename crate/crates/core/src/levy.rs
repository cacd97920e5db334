//! Parametric Lévy processes with closed-form cumulants.
//!
//! Two families are supported, both with exponential moments of every order:
//! Brownian motion with drift, and a compound Poisson process with Gaussian
//! jumps plus linear drift. The latter is lattice when the jump law is a
//! point mass.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Lévy process `ξ` given by its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LevyModel {
    /// `ξ(t) = μt + σB(t)`.
    #[serde(rename = "brownian")]
    Brownian { mu: f64, sigma: f64 },
    /// `ξ(t) = ct + Σ_{k ≤ P(ρt)} J_k` with `J_k ~ N(m, s²)`.
    #[serde(rename = "cpg")]
    CompoundPoissonGauss {
        rate: f64,
        jump_mean: f64,
        jump_sd: f64,
        drift: f64,
    },
}

/// `ψ(u)` together with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cumulant {
    pub psi: f64,
    pub psi1: f64,
    pub psi2: f64,
}

/// Right end of the range of `ψ'` on `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperLimit {
    Finite(f64),
    Infinite,
}

impl UpperLimit {
    /// `true` when `x` lies strictly below the limit.
    pub fn exceeds(&self, x: f64) -> bool {
        match *self {
            UpperLimit::Finite(b) => x < b,
            UpperLimit::Infinite => x.is_finite(),
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            UpperLimit::Finite(b) => b,
            UpperLimit::Infinite => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for UpperLimit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpperLimit::Finite(b) => write!(f, "{b}"),
            UpperLimit::Infinite => f.write_str("+inf"),
        }
    }
}

impl LevyModel {
    pub fn brownian(mu: f64, sigma: f64) -> Result<Self> {
        let m = LevyModel::Brownian { mu, sigma };
        m.validate()?;
        Ok(m)
    }

    pub fn compound_poisson_gauss(rate: f64, jump_mean: f64, jump_sd: f64, drift: f64) -> Result<Self> {
        let m = LevyModel::CompoundPoissonGauss {
            rate,
            jump_mean,
            jump_sd,
            drift,
        };
        m.validate()?;
        Ok(m)
    }

    /// Standard Brownian motion.
    pub fn standard_brownian() -> Self {
        LevyModel::Brownian { mu: 0.0, sigma: 1.0 }
    }

    /// Checks finiteness and that `ξ(1)` is not almost surely constant.
    pub fn validate(&self) -> Result<()> {
        match *self {
            LevyModel::Brownian { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() {
                    return Err(Error::InvalidModel("brownian parameters must be finite".into()));
                }
                if sigma <= 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "brownian volatility must be positive, got {sigma}"
                    )));
                }
            }
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                drift,
            } => {
                if ![rate, jump_mean, jump_sd, drift].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidModel("cpg parameters must be finite".into()));
                }
                if rate <= 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "jump rate must be positive, got {rate}"
                    )));
                }
                if jump_sd < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "jump standard deviation must be non-negative, got {jump_sd}"
                    )));
                }
                if jump_sd == 0.0 && jump_mean == 0.0 {
                    return Err(Error::InvalidModel(
                        "jumps are identically zero, so xi(1) is a.s. constant".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Jumps concentrated on a single point.
    pub fn is_lattice(&self) -> bool {
        matches!(*self, LevyModel::CompoundPoissonGauss { jump_sd, .. } if jump_sd == 0.0)
    }

    pub fn psi(&self, u: f64) -> f64 {
        match *self {
            LevyModel::Brownian { mu, sigma } => mu * u + 0.5 * sigma * sigma * u * u,
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                drift,
            } => drift * u + rate * (jump_mean * u + 0.5 * jump_sd * jump_sd * u * u).exp_m1(),
        }
    }

    pub fn psi1(&self, u: f64) -> f64 {
        self.cumulant(u).psi1
    }

    pub fn psi2(&self, u: f64) -> f64 {
        self.cumulant(u).psi2
    }

    /// `(ψ(u), ψ'(u), ψ''(u))` in closed form.
    pub fn cumulant(&self, u: f64) -> Cumulant {
        match *self {
            LevyModel::Brownian { mu, sigma } => {
                let v = sigma * sigma;
                Cumulant {
                    psi: mu * u + 0.5 * v * u * u,
                    psi1: mu + v * u,
                    psi2: v,
                }
            }
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                drift,
            } => {
                let v = jump_sd * jump_sd;
                let expo = jump_mean * u + 0.5 * v * u * u;
                let e = expo.exp();
                let slope = jump_mean + v * u;
                Cumulant {
                    psi: drift * u + rate * expo.exp_m1(),
                    psi1: drift + rate * slope * e,
                    psi2: rate * (slope * slope + v) * e,
                }
            }
        }
    }

    /// `β₀ = ψ'(0) = E ξ(1)`.
    pub fn beta0(&self) -> f64 {
        self.psi1(0.0)
    }

    /// `β_∞ = lim_{u→∞} ψ'(u)`.
    pub fn beta_inf(&self) -> UpperLimit {
        match *self {
            LevyModel::Brownian { .. } => UpperLimit::Infinite,
            LevyModel::CompoundPoissonGauss {
                jump_mean,
                jump_sd,
                drift,
                ..
            } => {
                if jump_sd > 0.0 || jump_mean > 0.0 {
                    UpperLimit::Infinite
                } else {
                    UpperLimit::Finite(drift)
                }
            }
        }
    }

    pub fn domain_bounds(&self) -> (f64, UpperLimit) {
        (self.beta0(), self.beta_inf())
    }

    /// Exponentially tilted model with cumulant `ψ(u+κ) − ψ(κ)`.
    pub fn tilt(&self, kappa: f64) -> LevyModel {
        match *self {
            LevyModel::Brownian { mu, sigma } => LevyModel::Brownian {
                mu: mu + sigma * sigma * kappa,
                sigma,
            },
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                drift,
            } => {
                let v = jump_sd * jump_sd;
                LevyModel::CompoundPoissonGauss {
                    rate: rate * (jump_mean * kappa + 0.5 * v * kappa * kappa).exp(),
                    jump_mean: jump_mean + v * kappa,
                    jump_sd,
                    drift,
                }
            }
        }
    }

    /// One draw of `ξ(t)` (equivalently of any increment of length `t`).
    pub fn sample_increment<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::domain("increment length", t, "[0, +inf)"));
        }
        Ok(self.increment_unchecked(t, rng))
    }

    #[inline]
    pub(crate) fn increment_unchecked<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        match *self {
            LevyModel::Brownian { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mu * t + sigma * t.sqrt() * z
            }
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                drift,
            } => {
                let count: f64 = Poisson::new(rate * t)
                    .expect("rate * t is positive and finite")
                    .sample(rng);
                let mut x = drift * t + jump_mean * count;
                if jump_sd > 0.0 && count > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    x += jump_sd * count.sqrt() * z;
                }
                x
            }
        }
    }

    /// `ξ` observed on a nondecreasing grid of times `t₀ ≥ 0`.
    pub fn sample_path<R: Rng + ?Sized>(&self, grid: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_time_grid(grid)?;
        let mut out = Vec::with_capacity(grid.len());
        self.fill_path(grid, rng, &mut out);
        Ok(out)
    }

    /// Appends the path on an already validated grid.
    #[inline]
    pub(crate) fn fill_path<R: Rng + ?Sized>(&self, grid: &[f64], rng: &mut R, out: &mut Vec<f64>) {
        let mut prev_t = 0.0;
        let mut x = 0.0;
        for &t in grid {
            x += self.increment_unchecked(t - prev_t, rng);
            out.push(x);
            prev_t = t;
        }
    }
}

/// Nondecreasing, finite, starting at or after time zero.
pub(crate) fn check_time_grid(grid: &[f64]) -> Result<()> {
    if let Some(&first) = grid.first() {
        if !(first >= 0.0) {
            return Err(Error::InvalidGrid(format!("first time {first} is negative")));
        }
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("grid contains non-finite times".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidGrid("grid is not sorted".into()));
    }
    Ok(())
}
