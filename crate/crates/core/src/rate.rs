//! Legendre–Fenchel rate function of a Lévy model.
//!
//! Everything is parametrized through `u ≥ 0`: a level `β` corresponds to the
//! unique `u` with `ψ'(u) = β`, and then `I(β) = uβ − ψ(u)`, `I'(β) = u`.
//! The scalar equations are solved by a Newton iteration kept inside a
//! bisection bracket.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy::LevyModel;

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Bracket growth stops here; `ψ` overflows well before.
const MAX_BRACKET_DOUBLINGS: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct RateProfile {
    model: LevyModel,
    tolerance: f64,
    max_iter: usize,
}

/// `I(β)`, `I'(β)` and the dual variable `u(β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub value: f64,
    pub slope: f64,
    pub u: f64,
}

impl RateProfile {
    pub fn new(model: LevyModel) -> Self {
        Self {
            model,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64, max_iter: usize) -> Self {
        self.tolerance = tolerance;
        self.max_iter = max_iter;
        self
    }

    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    /// `sup I = lim_{u→∞} (uψ'(u) − ψ(u))`.
    pub fn sup(&self) -> f64 {
        match self.model {
            LevyModel::Brownian { .. } => f64::INFINITY,
            LevyModel::CompoundPoissonGauss {
                rate,
                jump_mean,
                jump_sd,
                ..
            } => {
                if jump_sd > 0.0 || jump_mean > 0.0 {
                    f64::INFINITY
                } else {
                    // s = 0, m < 0: uψ' − ψ = ρ(1 + (mu − 1)e^{mu}) → ρ
                    rate
                }
            }
        }
    }

    fn domain_string(&self) -> String {
        format!("[{}, {})", self.model.beta0(), self.model.beta_inf())
    }

    fn check_level(&self, beta: f64) -> Result<()> {
        let beta0 = self.model.beta0();
        if !(beta >= beta0) || !self.model.beta_inf().exceeds(beta) {
            return Err(Error::domain("beta", beta, self.domain_string()));
        }
        Ok(())
    }

    /// Solves `ψ'(u) = β` for `u ≥ 0`.
    pub fn dual(&self, beta: f64) -> Result<f64> {
        self.check_level(beta)?;
        if beta == self.model.beta0() {
            return Ok(0.0);
        }
        let m = self.model;
        self.solve_increasing(beta, |u| {
            let c = m.cumulant(u);
            (c.psi1, c.psi2)
        })
    }

    pub fn eval(&self, beta: f64) -> Result<RatePoint> {
        let u = self.dual(beta)?;
        Ok(RatePoint {
            value: u * beta - self.model.psi(u),
            slope: u,
            u,
        })
    }

    /// `I` evaluated at `ψ'(u)`, straight from the conjugacy identity.
    pub fn value_at_dual(&self, u: f64) -> f64 {
        let c = self.model.cumulant(u);
        u * c.psi1 - c.psi
    }

    /// `I⁻¹(y)` on `[0, sup I)`.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        let sup = self.sup();
        if !(y >= 0.0) || !(y < sup) {
            return Err(Error::domain("rate level", y, format!("[0, {sup})")));
        }
        if y == 0.0 {
            return Ok(self.model.beta0());
        }
        let u = self.solve_conjugate(y)?;
        Ok(self.model.psi1(u))
    }

    /// `(λ₁, λ₂) = (I(ψ'(1)), I(ψ'(2)))`.
    pub fn critical_points(&self) -> (f64, f64) {
        (self.value_at_dual(1.0), self.value_at_dual(2.0))
    }

    /// The `α ∈ (0, 2)` with `I(ψ'(α)) = λ`.
    pub fn solve_alpha(&self, lambda: f64) -> Result<f64> {
        let (_, lambda2) = self.critical_points();
        if !(lambda > 0.0) || !(lambda < lambda2) {
            return Err(Error::domain("lambda", lambda, format!("(0, {lambda2})")));
        }
        let alpha = self.solve_conjugate(lambda)?;
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::Numerical(format!(
                "alpha = {alpha} for lambda = {lambda} left (0, 2)"
            )));
        }
        Ok(alpha)
    }

    /// Rate function of the model tilted by `κ`: `I(β) + ψ(κ) − κβ`.
    pub fn tilted_rate(&self, beta: f64, kappa: f64) -> Result<f64> {
        let p = self.eval(beta)?;
        Ok(p.value + self.model.psi(kappa) - kappa * beta)
    }

    /// Solves `uψ'(u) − ψ(u) = y` for `u > 0`; the left side is increasing
    /// with derivative `uψ''(u)`.
    fn solve_conjugate(&self, y: f64) -> Result<f64> {
        let m = self.model;
        self.solve_increasing(y, |u| {
            let c = m.cumulant(u);
            (u * c.psi1 - c.psi, u * c.psi2)
        })
    }

    /// Root of `f(u) = target` on `u > 0` for increasing `f` with `f(0) < target`.
    fn solve_increasing<F>(&self, target: f64, f: F) -> Result<f64>
    where
        F: Fn(f64) -> (f64, f64),
    {
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut doublings = 0;
        loop {
            let (v, _) = f(hi);
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "bracket search overflowed at u = {hi} for target {target}"
                )));
            }
            if v > target {
                break;
            }
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_BRACKET_DOUBLINGS {
                return Err(Error::Numerical(format!("no bracket found for target {target}")));
            }
        }

        let mut u = 0.5 * (lo + hi);
        for _ in 0..self.max_iter {
            let (v, dv) = f(u);
            let resid = v - target;
            if resid == 0.0 {
                return Ok(u);
            }
            if resid > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let newton = u - resid / dv;
            let next = if dv > 0.0 && newton >= lo && newton <= hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let step = (next - u).abs();
            u = next;
            if step <= self.tolerance * u.abs() || hi - lo <= self.tolerance * u.abs() {
                return Ok(u);
            }
        }
        Err(Error::Numerical(format!(
            "solver did not converge in {} iterations (target {target}, bracket [{lo}, {hi}])",
            self.max_iter
        )))
    }
}

impl LevyModel {
    pub fn rate_profile(&self) -> RateProfile {
        RateProfile::new(*self)
    }
}
