//! Goodness-of-fit tests, tail-index estimation, and checks that compare
//! simulations and closed forms against the asymptotic statements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ensemble::{simulate_ensemble, CompensatedSum, EnsembleSpec, EnsembleSummary};
use crate::error::{Error, Result};
use crate::levy::LevyModel;
use crate::limit::{exp_covariance, ou_rate, sample_ou, CltGaussian, Grid};
use crate::regimes::{truncated_exp_moment_side, MomentMethod, Truncation};
use crate::rng::{tag, StreamFamily};
use crate::special::{frechet_cdf, norm_cdf};

/// Default significance floor for KS-based checks.
pub const KS_P_FLOOR: f64 = 1e-3;
/// Standard errors allowed for moment checks.
pub const MOMENT_SE: f64 = 3.0;
/// Standard errors allowed per covariance entry.
pub const COVARIANCE_SE: f64 = 4.0;

const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// `P[K > λ]` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI.powi(2);
        let mut cdf = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            cdf += (-j * j * pi2 / (8.0 * lambda * lambda)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sf = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sf += if k % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (2.0 * sf).clamp(0.0, 1.0)
    }
}

/// One-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult> {
    if sample.len() < 8 {
        return Err(Error::Config(format!(
            "KS test needs at least 8 points, got {}",
            sample.len()
        )));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "KS test sample contains non-finite values".into(),
        ));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(n.sqrt() * d),
        n: xs.len(),
    })
}

/// `⌈√n⌉`, capped at `n/10` (and at least 1).
pub fn default_hill_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).min(n / 10).max(1)
}

/// Hill estimate of the tail index from the `k` largest points.
pub fn hill_estimator(sample: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k >= sample.len() {
        return Err(Error::Config(format!(
            "Hill k = {k} must lie in [1, {})",
            sample.len()
        )));
    }
    if sample.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Config("Hill estimator needs positive finite data".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| b.total_cmp(a));
    let pivot = xs[k].ln();
    let denom: f64 = xs[..k].iter().map(|x| x.ln() - pivot).sum();
    if !(denom > 0.0) {
        return Err(Error::Numerical(
            "Hill denominator vanishes; top order statistics are tied".into(),
        ));
    }
    Ok(k as f64 / denom)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// How a report's pass flag follows from its numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassRule {
    /// `|observed − reference| ≤ tolerance` for every entry.
    AllWithin,
    /// Only the last entry must be within tolerance.
    FinalWithin,
    /// Every entry within tolerance and the error nonincreasing along the list.
    WithinImproving,
    /// `observed ≥ reference` for every entry.
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckReport {
    pub name: String,
    pub params: Value,
    pub observed: Vec<f64>,
    pub reference: Vec<f64>,
    pub tolerance: Vec<f64>,
    pub stderr: Vec<f64>,
    pub rule: PassRule,
    pub passed: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CheckReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        params: Value,
        observed: Vec<f64>,
        reference: Vec<f64>,
        tolerance: Vec<f64>,
        stderr: Vec<f64>,
        rule: PassRule,
        seed: Option<u64>,
    ) -> Self {
        let mut r = Self {
            name: name.into(),
            params,
            observed,
            reference,
            tolerance,
            stderr,
            rule,
            passed: false,
            seed,
        };
        r.passed = r.decide();
        r
    }

    /// Pass decision recomputed from the stored numbers.
    pub fn decide(&self) -> bool {
        let n = self.observed.len();
        if n == 0 || self.reference.len() != n {
            return false;
        }
        let within = |i: usize| {
            let tol = self.tolerance.get(i).copied().unwrap_or(0.0);
            (self.observed[i] - self.reference[i]).abs() <= tol
        };
        match self.rule {
            PassRule::AllWithin => (0..n).all(within),
            PassRule::FinalWithin => within(n - 1),
            PassRule::WithinImproving => {
                (0..n).all(within)
                    && (1..n).all(|i| {
                        (self.observed[i] - self.reference[i]).abs()
                            <= (self.observed[i - 1] - self.reference[i - 1]).abs()
                    })
            }
            PassRule::AtLeast => (0..n).all(|i| self.observed[i] >= self.reference[i]),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.passed == self.decide()
    }
}

/// Which statement about truncated exponential moments is checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "part", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruncatedPart {
    /// `b = ψ'(κ)x + ϑ√(ψ''(κ)x)`: the normalized lower moment tends to `Φ(ϑ)`.
    Central { theta: f64 },
    /// `b/x → ψ'(α)` with `α > κ`: sharp asymptotics of the upper moment.
    Upper,
    /// `b/x → ψ'(α)` with `α < κ`: sharp asymptotics of the lower moment.
    Lower,
}

impl TruncatedPart {
    /// Canonical schedule: `b` on the central line for `Central`, and
    /// `b = ψ'(α)x` otherwise.
    pub fn schedule(&self, model: &LevyModel, kappa: f64, alpha: f64, xs: &[f64]) -> Vec<(f64, f64)> {
        xs.iter()
            .map(|&x| match *self {
                TruncatedPart::Central { theta } => {
                    (x, model.psi1(kappa) * x + theta * (model.psi2(kappa) * x).sqrt())
                }
                _ => (x, model.psi1(alpha) * x),
            })
            .collect()
    }
}

pub fn verify_truncated_moments(
    model: &LevyModel,
    kappa: f64,
    part: TruncatedPart,
    schedule: &[(f64, f64)],
    method: MomentMethod,
    tolerance: f64,
) -> Result<CheckReport> {
    if schedule.is_empty() {
        return Err(Error::Config("empty schedule".into()));
    }
    let profile = model.rate_profile();
    let mut observed = Vec::with_capacity(schedule.len());
    let mut stderr = Vec::with_capacity(schedule.len());
    let mut alphas = Vec::new();
    let reference_value = match part {
        TruncatedPart::Central { theta } => norm_cdf(theta),
        _ => 1.0,
    };
    for &(x, b) in schedule {
        match part {
            TruncatedPart::Central { theta } => {
                let implied = (b - model.psi1(kappa) * x) / (model.psi2(kappa) * x).sqrt();
                if !((implied - theta).abs() <= 1e-6 * (1.0 + theta.abs())) {
                    return Err(Error::Config(format!(
                        "schedule point (x = {x}, b = {b}) is off the central line: implied theta {implied} != {theta}"
                    )));
                }
                let m = truncated_exp_moment_side(model, kappa, x, b, Truncation::AtMost, method)?;
                observed.push(m.prob);
                stderr.push(m.prob_stderr);
            }
            TruncatedPart::Upper | TruncatedPart::Lower => {
                let beta = b / x;
                let alpha = profile
                    .dual(beta)
                    .map_err(|e| Error::Config(format!("b/x = {beta}: {e}")))?;
                let (side, ok) = match part {
                    TruncatedPart::Upper => (Truncation::Above, alpha > kappa),
                    _ => (Truncation::AtMost, alpha > 0.0 && alpha < kappa),
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "b/x = {beta} gives alpha = {alpha}, violating the hypothesis of {part:?} with kappa = {kappa}"
                    )));
                }
                // rare events: tilt at α rather than κ
                let (ln_lhs, rel_se) = match method {
                    MomentMethod::ClosedForm => {
                        let m = truncated_exp_moment_side(model, kappa, x, b, side, method)?;
                        (m.log_scale + m.ln_prob, 0.0)
                    }
                    MomentMethod::TiltedMc { replicates, seed } => {
                        let (ln_pre, mean, se) = match side {
                            Truncation::Above => {
                                tilted_estimate(model, kappa, alpha, x, b, |e| e > 0.0, replicates, seed)
                            }
                            Truncation::AtMost => {
                                tilted_estimate(model, kappa, alpha, x, b, |e| e <= 0.0, replicates, seed)
                            }
                        };
                        (ln_pre + mean.ln(), if mean > 0.0 { se / mean } else { 0.0 })
                    }
                };
                let ln_rhs = kappa * b
                    - (alpha - kappa).abs().ln()
                    - 0.5 * (2.0 * std::f64::consts::PI * model.psi2(alpha) * x).ln()
                    - profile.value_at_dual(alpha) * x;
                let ratio = (ln_lhs - ln_rhs).exp();
                observed.push(ratio);
                stderr.push(ratio * rel_se);
                alphas.push(alpha);
            }
        }
    }
    let n = observed.len();
    let tol: Vec<f64> = stderr.iter().map(|se| tolerance + MOMENT_SE * se).collect();
    let (seed, method_name) = match method {
        MomentMethod::ClosedForm => (None, "closed_form"),
        MomentMethod::TiltedMc { seed, .. } => (Some(seed), "tilted_mc"),
    };
    Ok(CheckReport::new(
        "truncated_moments",
        json!({
            "model": model,
            "kappa": kappa,
            "part": part,
            "x": schedule.iter().map(|p| p.0).collect::<Vec<_>>(),
            "b": schedule.iter().map(|p| p.1).collect::<Vec<_>>(),
            "alpha": alphas,
            "method": method_name,
            "tolerance": tolerance,
        }),
        observed,
        vec![reference_value; n],
        tol,
        stderr,
        PassRule::FinalWithin,
        seed,
    ))
}

/// Importance-sampling estimate of `E[e^{κξ(x)} 1{ξ(x) − b ∈ A}]` under the
/// `θ`-tilt, returned as `(ln prefactor, mean, stderr)` with the estimate equal
/// to `e^{ln prefactor}·mean`.
#[allow(clippy::too_many_arguments)]
fn tilted_estimate<F: Fn(f64) -> bool + Sync>(
    model: &LevyModel,
    kappa: f64,
    theta: f64,
    x: f64,
    b: f64,
    accept: F,
    replicates: u64,
    seed: u64,
) -> (f64, f64, f64) {
    let tilted = model.tilt(theta);
    let family = StreamFamily::new(seed);
    let chunks = replicates.div_ceil(MC_CHUNK);
    let parts: Vec<(CompensatedSum, CompensatedSum)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = family.stream(&[tag::CHECK, x.to_bits(), b.to_bits(), c]);
            let mut s1 = CompensatedSum::default();
            let mut s2 = CompensatedSum::default();
            for _ in 0..MC_CHUNK.min(replicates - c * MC_CHUNK) {
                let excess = tilted.increment_unchecked(x, &mut rng) - b;
                if accept(excess) {
                    let w = ((kappa - theta) * excess).exp();
                    s1.add(w);
                    s2.add(w * w);
                }
            }
            (s1, s2)
        })
        .collect();
    let (mut s1, mut s2) = (CompensatedSum::default(), CompensatedSum::default());
    for (a, b) in &parts {
        s1.merge(a);
        s2.merge(b);
    }
    let n = replicates as f64;
    let mean = s1.value() / n;
    let var = (s2.value() / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (model.psi(theta) * x + (kappa - theta) * b, mean, (var / n).sqrt())
}

/// Ratio of the exact tail probability to the Bahadur-Rao approximation at
/// each horizon. `tolerances` holds one value per horizon or a single value.
pub fn verify_bahadur_rao(
    model: &LevyModel,
    beta: f64,
    horizons: &[f64],
    tolerances: &[f64],
    method: MomentMethod,
) -> Result<CheckReport> {
    if horizons.is_empty() {
        return Err(Error::Config("no horizons given".into()));
    }
    if tolerances.len() != 1 && tolerances.len() != horizons.len() {
        return Err(Error::Config("give one tolerance or one per horizon".into()));
    }
    if horizons.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::Config("horizons must be positive".into()));
    }
    let (beta0, beta_inf) = model.domain_bounds();
    if !(beta > beta0) || !beta_inf.exceeds(beta) {
        return Err(Error::Config(format!(
            "beta = {beta} must lie strictly inside ({beta0}, {beta_inf})"
        )));
    }
    let profile = model.rate_profile();
    let alpha = profile.dual(beta)?;
    let rate = profile.value_at_dual(alpha);
    let psi2 = model.psi2(alpha);
    let mut observed = Vec::with_capacity(horizons.len());
    let mut stderr = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let prefactor = alpha * (2.0 * std::f64::consts::PI * psi2 * t).sqrt();
        let (ratio, se) = match (method, model) {
            (MomentMethod::ClosedForm, LevyModel::Brownian { mu, sigma }) => {
                let z = (beta - mu) * t.sqrt() / sigma;
                // P = Φ̄(z), RHS = e^{-I T}/prefactor
                let ln_lhs = crate::special::ln_norm_sf(z);
                ((ln_lhs + rate * t).exp() * prefactor, 0.0)
            }
            (MomentMethod::ClosedForm, _) => {
                return Err(Error::Unsupported(
                    "closed-form tail probabilities exist only for Brownian motion".into(),
                ))
            }
            (MomentMethod::TiltedMc { replicates, seed }, _) => {
                // ln prefactor of the estimator is −I(β)T
                let (_, m, se) =
                    tilted_estimate(model, 0.0, alpha, t, beta * t, |e| e >= 0.0, replicates, seed);
                (m * prefactor, se * prefactor)
            }
        };
        observed.push(ratio);
        stderr.push(se);
    }
    let tol: Vec<f64> = (0..horizons.len())
        .map(|i| tolerances[i.min(tolerances.len() - 1)] + MOMENT_SE * stderr[i])
        .collect();
    let seed = match method {
        MomentMethod::TiltedMc { seed, .. } => Some(seed),
        MomentMethod::ClosedForm => None,
    };
    Ok(CheckReport::new(
        "bahadur_rao",
        json!({ "model": model, "beta": beta, "alpha": alpha, "horizons": horizons }),
        observed,
        vec![1.0; horizons.len()],
        tol,
        stderr,
        PassRule::WithinImproving,
        seed,
    ))
}

/// Order-statistic checks run on one fast-regime ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderStatsPlan {
    /// Levels for `N·P[W(0) > τ] → τ^{−α}`.
    #[serde(default)]
    pub taus: Vec<f64>,
    /// `(κ, τ)` pairs for `N·E[W^κ 1{W > τ}] → α τ^{κ−α}/(α−κ)`.
    #[serde(default)]
    pub moments: Vec<(f64, f64)>,
    /// Hill `k` on the normalized `t = 0` marginals; `None` skips the check.
    #[serde(default)]
    pub hill_k: Option<usize>,
    /// Accepted band for the Hill estimate around `α`.
    #[serde(default = "default_hill_band")]
    pub hill_band: f64,
}

fn default_hill_band() -> f64 {
    0.1
}

pub fn verify_order_stats(spec: &EnsembleSpec, plan: &OrderStatsPlan) -> Result<Vec<CheckReport>> {
    if spec.top_k == 0 {
        return Err(Error::Config("order-statistic checks need top_k > 0".into()));
    }
    let summary = simulate_ensemble(spec)?;
    order_stats_reports(&summary, plan)
}

/// Reports from an existing ensemble with tracked top order statistics.
pub fn order_stats_reports(summary: &EnsembleSummary, plan: &OrderStatsPlan) -> Result<Vec<CheckReport>> {
    let alpha = summary
        .regime
        .alpha()
        .ok_or_else(|| Error::Config("order-statistic checks need the fast regime".into()))?;
    let seed = Some(summary.seed);
    let base = json!({
        "alpha": alpha,
        "n": summary.n,
        "s": summary.s,
        "replicates": summary.top.len(),
        "lattice_warning": summary.regime.lattice_warning,
    });
    let with = |extra: Value| {
        let mut p = base.clone();
        if let (Some(p), Value::Object(e)) = (p.as_object_mut(), extra) {
            p.extend(e);
        }
        p
    };
    let mut out = Vec::new();

    let w1: Vec<f64> = summary
        .top
        .iter()
        .map(|t| {
            t.first()
                .copied()
                .ok_or_else(|| Error::Config("empty top list".into()))
        })
        .collect::<Result<_>>()?;
    let ks = ks_test(&w1, |u| frechet_cdf(alpha, u))?;
    out.push(CheckReport::new(
        "order_stats.max_frechet_ks",
        with(json!({ "statistic": ks.statistic })),
        vec![ks.p_value],
        vec![KS_P_FLOOR],
        vec![0.0],
        vec![],
        PassRule::AtLeast,
        seed,
    ));

    // counts above τ are exact only if every list reaches below τ or holds all N values
    let complete_above = |tau: f64| -> Result<()> {
        for t in &summary.top {
            if (t.len() as u64) < summary.n && t.last().is_some_and(|&w| w > tau) {
                return Err(Error::Config(format!(
                    "top_k = {} does not reach below tau = {tau}; increase top_k",
                    t.len()
                )));
            }
        }
        Ok(())
    };

    if !plan.taus.is_empty() {
        let mut obs = Vec::new();
        let mut refs = Vec::new();
        let mut ses = Vec::new();
        for &tau in &plan.taus {
            complete_above(tau)?;
            let counts: Vec<f64> = summary
                .top
                .iter()
                .map(|t| t.iter().filter(|&&w| w > tau).count() as f64)
                .collect();
            let (m, se) = mean_and_se(&counts);
            obs.push(m);
            refs.push(tau.powf(-alpha));
            ses.push(se);
        }
        let tol = ses.iter().map(|se| MOMENT_SE * se).collect();
        out.push(CheckReport::new(
            "order_stats.tail_count",
            with(json!({ "tau": plan.taus })),
            obs,
            refs,
            tol,
            ses,
            PassRule::AllWithin,
            seed,
        ));
    }

    if !plan.moments.is_empty() {
        let mut obs = Vec::new();
        let mut refs = Vec::new();
        let mut ses = Vec::new();
        for &(kappa, tau) in &plan.moments {
            if !(kappa < alpha) {
                return Err(Error::Config(format!(
                    "tail moment needs kappa < alpha, got {kappa} >= {alpha}"
                )));
            }
            complete_above(tau)?;
            let sums: Vec<f64> = summary
                .top
                .iter()
                .map(|t| t.iter().filter(|&&w| w > tau).map(|w| w.powf(kappa)).sum())
                .collect();
            let (m, se) = mean_and_se(&sums);
            obs.push(m);
            refs.push(alpha / (alpha - kappa) * tau.powf(kappa - alpha));
            ses.push(se);
        }
        let tol = ses.iter().map(|se| MOMENT_SE * se).collect();
        out.push(CheckReport::new(
            "order_stats.tail_moment",
            with(json!({ "kappa_tau": plan.moments })),
            obs,
            refs,
            tol,
            ses,
            PassRule::AllWithin,
            seed,
        ));
    }

    if let Some(k) = plan.hill_k {
        let j = summary
            .grid
            .iter()
            .position(|&t| t == 0.0)
            .ok_or_else(|| Error::Config("Hill check needs t = 0 in the grid".into()))?;
        let y: Vec<f64> = summary
            .normalized
            .iter()
            .map(|v| v[j])
            .filter(|&v| v > 0.0)
            .collect();
        let est = hill_estimator(&y, k)?;
        out.push(CheckReport::new(
            "order_stats.hill",
            with(json!({ "k": k, "positive_values": y.len() })),
            vec![est],
            vec![alpha],
            vec![plan.hill_band],
            vec![],
            PassRule::AllWithin,
            seed,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// `Cov(e^{ξ(t₁)}, e^{ξ(t₂)})` from direct Lévy paths.
    RawExp,
    /// Gaussian limit of the constant horizon.
    CltG,
    /// Ornstein-Uhlenbeck limit.
    Ou,
}

/// Empirical covariance of the chosen sampler against its closed form, per
/// upper-triangular entry.
pub fn verify_covariance(
    model: &LevyModel,
    grid: &Grid,
    mode: CovarianceMode,
    samples: u64,
    seed: u64,
) -> Result<CheckReport> {
    if samples < 2 {
        return Err(Error::Config("covariance check needs at least 2 samples".into()));
    }
    let t = grid.times();
    let family = StreamFamily::new(seed);
    let mut rng = family.stream(&[tag::CHECK, mode as u64]);
    let gaussian = match mode {
        CovarianceMode::CltG => Some(CltGaussian::new(model, grid)?),
        _ => None,
    };
    if mode == CovarianceMode::RawExp {
        grid.require_nonnegative("the raw exponential path")?;
    }
    let paths: Vec<Vec<f64>> = (0..samples)
        .map(|_| match mode {
            CovarianceMode::RawExp => {
                let mut xi = Vec::with_capacity(t.len());
                model.fill_path(t, &mut rng, &mut xi);
                xi.into_iter().map(f64::exp).collect()
            }
            CovarianceMode::CltG => gaussian.as_ref().expect("built above").sample(&mut rng),
            CovarianceMode::Ou => sample_ou(model, grid, &mut rng),
        })
        .collect();
    let n = samples as f64;
    let means: Vec<f64> = (0..t.len())
        .map(|j| paths.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let mut observed = Vec::new();
    let mut reference = Vec::new();
    let mut stderr = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..t.len() {
        for j in i..t.len() {
            let prods: Vec<f64> = paths
                .iter()
                .map(|p| (p[i] - means[i]) * (p[j] - means[j]))
                .collect();
            let (m, se) = mean_and_se(&prods);
            observed.push(m * n / (n - 1.0));
            stderr.push(se);
            reference.push(match mode {
                CovarianceMode::RawExp | CovarianceMode::CltG => exp_covariance(model, t[i], t[j]),
                CovarianceMode::Ou => (ou_rate(model) * (t[j] - t[i]).abs()).exp(),
            });
            pairs.push((t[i], t[j]));
        }
    }
    let tol = stderr.iter().map(|se| COVARIANCE_SE * se).collect();
    Ok(CheckReport::new(
        "covariance",
        json!({ "model": model, "mode": mode, "pairs": pairs, "samples": samples }),
        observed,
        reference,
        tol,
        stderr,
        PassRule::AllWithin,
        Some(seed),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regimes::GrowthRule;
    use crate::special::norm_cdf;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bm() -> LevyModel {
        LevyModel::standard_brownian()
    }

    #[test]
    fn kolmogorov_tail_values() {
        // reference values of the Kolmogorov distribution
        assert!((kolmogorov_sf(1.0) - 0.269_999_671_677_355_5).abs() < 1e-9);
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
        assert!((kolmogorov_sf(0.5) - 0.963_945_243_664_307_3).abs() < 1e-9);
        // both series agree at the switch point
        let pi2 = std::f64::consts::PI.powi(2);
        let l = 1.18;
        let theta: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * pi2 / (8.0 * l * l)).exp()
            })
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / l;
        assert!((1.0 - theta - kolmogorov_sf(l)).abs() < 1e-12);
    }

    #[test]
    fn ks_null_calibration() {
        let fam = StreamFamily::new(1);
        let mut rng = fam.stream(&[0]);
        let mut rejections = 0;
        for _ in 0..200 {
            let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
            if ks_test(&xs, norm_cdf).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        let frac = rejections as f64 / 200.0;
        assert!(frac <= 0.10, "{frac}");
    }

    #[test]
    fn ks_statistic_bounds() {
        let r = ks_test(&[0.0; 10], norm_cdf).unwrap();
        assert!(r.statistic >= 0.5);
        let fam = StreamFamily::new(2);
        let mut rng = fam.stream(&[0]);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_test(&xs, norm_cdf).unwrap().statistic < 0.025);
        assert!(ks_test(&xs[..5], norm_cdf).is_err());
        assert!(ks_test(&[f64::NAN; 10], norm_cdf).is_err());
    }

    #[test]
    fn hill_examples() {
        let fam = StreamFamily::new(3);
        let mut rng = fam.stream(&[0]);
        let pareto: Vec<f64> = (0..10_000).map(|_| 1.0 / (1.0 - rng.random::<f64>())).collect();
        let a = hill_estimator(&pareto, 500).unwrap();
        assert!((a - 1.0).abs() <= 0.15, "{a}");
        let scaled: Vec<f64> = pareto.iter().map(|x| 7.5 * x).collect();
        assert!((hill_estimator(&scaled, 500).unwrap() - a).abs() < 1e-12);
        let frechet: Vec<f64> = (0..10_000)
            .map(|_| (-(rng.random::<f64>()).ln()).powf(-1.0 / 0.5))
            .collect();
        let b = hill_estimator(&frechet, 200).unwrap();
        assert!((b - 0.5).abs() <= 0.12, "{b}");
        assert!(hill_estimator(&[1.0; 20], 5).is_err());
        assert!(hill_estimator(&[1.0, 2.0], 2).is_err());
        assert_eq!(default_hill_k(10_000), 100);
        assert_eq!(default_hill_k(50), 5);
    }

    #[test]
    fn report_decision_is_recomputable() {
        let r = CheckReport::new(
            "x",
            json!({}),
            vec![1.0, 2.0],
            vec![1.1, 2.0],
            vec![0.2, 0.0],
            vec![],
            PassRule::AllWithin,
            None,
        );
        assert!(r.passed && r.is_consistent());
        let r = CheckReport::new(
            "x",
            json!({}),
            vec![1.5, 1.01],
            vec![1.0, 1.0],
            vec![0.6, 0.02],
            vec![],
            PassRule::WithinImproving,
            None,
        );
        assert!(r.passed);
        let r = CheckReport::new(
            "x",
            json!({}),
            vec![1.01, 1.5],
            vec![1.0, 1.0],
            vec![0.6, 0.6],
            vec![],
            PassRule::WithinImproving,
            None,
        );
        assert!(!r.passed);
        let r = CheckReport::new(
            "x",
            json!({}),
            vec![9.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![],
            PassRule::FinalWithin,
            None,
        );
        assert!(r.passed);
        let r = CheckReport::new(
            "x",
            json!({}),
            vec![0.01],
            vec![0.001],
            vec![],
            vec![],
            PassRule::AtLeast,
            None,
        );
        assert!(r.passed);
        let text = serde_json::to_string(&r).unwrap();
        let back: CheckReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(back.is_consistent());
    }

    #[test]
    fn truncated_part1_exact_for_brownian() {
        let m = bm();
        for &theta in &[-1.0, 0.0, 1.0] {
            let part = TruncatedPart::Central { theta };
            let sched = part.schedule(&m, 2.0, 0.0, &[1.0, 100.0, 1e4]);
            let r = verify_truncated_moments(&m, 2.0, part, &sched, MomentMethod::ClosedForm, 1e-10).unwrap();
            assert!(r.passed);
            for v in &r.observed {
                assert!((v - norm_cdf(theta)).abs() < 1e-12);
            }
        }
        assert!((norm_cdf(1.0) - 0.841_345).abs() < 1e-6);
        let bad = verify_truncated_moments(
            &m,
            2.0,
            TruncatedPart::Central { theta: 0.0 },
            &[(100.0, 250.0)],
            MomentMethod::ClosedForm,
            1e-10,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn truncated_part2_ratio_converges() {
        let m = bm();
        let sched = TruncatedPart::Upper.schedule(&m, 2.0, 3.0, &[25.0, 100.0, 400.0]);
        let r = verify_truncated_moments(
            &m,
            2.0,
            TruncatedPart::Upper,
            &sched,
            MomentMethod::ClosedForm,
            0.05,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.observed);
        let errs: Vec<f64> = r.observed.iter().map(|v| (v - 1.0).abs()).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]));
        // hypothesis violated: α < κ for the upper part
        let sched = TruncatedPart::Upper.schedule(&m, 2.0, 1.0, &[100.0]);
        assert!(verify_truncated_moments(
            &m,
            2.0,
            TruncatedPart::Upper,
            &sched,
            MomentMethod::ClosedForm,
            0.05
        )
        .is_err());
    }

    #[test]
    fn truncated_part3_ratio_converges() {
        let m = bm();
        let sched = TruncatedPart::Lower.schedule(&m, 2.0, 1.0, &[25.0, 100.0, 400.0, 1600.0]);
        let r = verify_truncated_moments(
            &m,
            2.0,
            TruncatedPart::Lower,
            &sched,
            MomentMethod::ClosedForm,
            0.05,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.observed);
    }

    #[test]
    fn truncated_part2_by_tilted_mc() {
        let m = LevyModel::compound_poisson_gauss(1.0, 0.3, 0.4, 0.0).unwrap();
        let sched = TruncatedPart::Upper.schedule(&m, 0.5, 1.5, &[50.0, 200.0]);
        let r = verify_truncated_moments(
            &m,
            0.5,
            TruncatedPart::Upper,
            &sched,
            MomentMethod::TiltedMc {
                replicates: 400_000,
                seed: 4,
            },
            0.1,
        )
        .unwrap();
        assert!(r.stderr.iter().all(|&s| s > 0.0));
        assert!(r.passed, "{:?}", r.observed);
        assert!(r.is_consistent());
    }

    #[test]
    fn bahadur_rao_examples() {
        let m = bm();
        let r = verify_bahadur_rao(
            &m,
            1.0,
            &[25.0, 100.0, 400.0],
            &[0.05, 0.02, 0.005],
            MomentMethod::ClosedForm,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.observed);
        assert!((r.observed[1] - 0.990).abs() < 1e-3);
        // independent oracle at T = 100: Φ̄(10)·√(200π)·e^{50}
        let oracle = 7.619_853_024_160_527e-24 * (200.0 * std::f64::consts::PI).sqrt() * 50f64.exp();
        assert!((r.observed[1] / oracle - 1.0).abs() < 1e-10);
        assert!((r.observed[2] - 1.0).abs() <= 0.005);
        assert!(matches!(
            verify_bahadur_rao(&m, 0.0, &[100.0], &[0.1], MomentMethod::ClosedForm),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bahadur_rao_importance_sampling_matches_closed_form() {
        let m = bm();
        let cf = verify_bahadur_rao(&m, 1.0, &[100.0], &[0.1], MomentMethod::ClosedForm).unwrap();
        let is = verify_bahadur_rao(
            &m,
            1.0,
            &[100.0],
            &[0.1],
            MomentMethod::TiltedMc {
                replicates: 200_000,
                seed: 5,
            },
        )
        .unwrap();
        assert!((is.observed[0] - cf.observed[0]).abs() <= 3.0 * is.stderr[0]);
    }

    #[test]
    fn covariance_checks() {
        let m = bm();
        let g = Grid::new(vec![0.0, 0.5, 1.0]).unwrap();
        for mode in [CovarianceMode::CltG, CovarianceMode::Ou] {
            let r = verify_covariance(&m, &g, mode, 100_000, 6).unwrap();
            assert!(r.passed, "{mode:?} {:?} vs {:?}", r.observed, r.reference);
        }
        let g = Grid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let r = verify_covariance(&m, &g, CovarianceMode::RawExp, 200_000, 7).unwrap();
        assert_eq!(r.observed[0], 0.0);
        assert!((r.reference[4] - (2.5f64.exp() - 1.5f64.exp())).abs() < 1e-12);
        assert!(r.is_consistent());
    }

    #[test]
    fn order_stats_needs_fast_regime_and_top_k() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 4.0 },
            100,
            10,
            Grid::new(vec![0.0]).unwrap(),
            1,
        );
        assert!(verify_order_stats(
            &spec,
            &OrderStatsPlan {
                taus: vec![1.0],
                moments: vec![],
                hill_k: None,
                hill_band: 0.1
            }
        )
        .is_err());
    }

    #[test]
    fn order_stats_small_fast_run() {
        let n = 20_000;
        let lambda = 0.125;
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda },
            n,
            300,
            Grid::new(vec![0.0]).unwrap(),
            2,
        )
        .with_top_k(50);
        let plan = OrderStatsPlan {
            taus: vec![1.0, 4.0],
            moments: vec![(0.25, 1.0)],
            hill_k: Some(30),
            hill_band: 0.2,
        };
        let reports = verify_order_stats(&spec, &plan).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports.iter().all(CheckReport::is_consistent));
        assert!(reports[0].passed, "{:?}", reports[0]);
        assert_eq!(reports[1].reference, vec![1.0, 0.5]);
        assert!((reports[2].reference[0] - 2.0).abs() < 1e-15);
    }
}
