//! Samplers for the limit processes: the Gaussian process of the constant
//! horizon, the stationary Ornstein-Uhlenbeck process, and the totally skewed
//! stable process built from a Poisson series.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::LevyModel;
use crate::rng::{tag, StreamFamily};

/// Default cap on the number of Poisson atoms per series sample.
pub const DEFAULT_MAX_ATOMS: u64 = 10_000_000;
/// Default target for the truncation error bound.
pub const DEFAULT_SERIES_TOLERANCE: f64 = 1e-3;
/// Eigenvalues below `-EIGEN_FLOOR · max(1, λ_max)` are an error; negative
/// eigenvalues above it are roundoff and clipped to zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Strictly increasing finite time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid(Vec<f64>);

impl Grid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("grid contains non-finite times".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("grid must be strictly increasing".into()));
        }
        Ok(Self(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn require_nonnegative(&self, what: &str) -> Result<()> {
        if self.min() < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "{what} is defined on t >= 0 only; the grid starts at {}",
                self.min()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Grid::new(v)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(g: Grid) -> Self {
        g.0
    }
}

/// `ψ(1) − ψ(2)/2`, the (negative) decay rate of the OU covariance.
pub fn ou_rate(model: &LevyModel) -> f64 {
    model.psi(1.0) - 0.5 * model.psi(2.0)
}

/// Stationary OU path with `Cov(X(t₁), X(t₂)) = e^{(ψ(1)−ψ(2)/2)|t₂−t₁|}`.
pub fn sample_ou<R: Rng + ?Sized>(model: &LevyModel, grid: &Grid, rng: &mut R) -> Vec<f64> {
    let rate = ou_rate(model);
    assert!(rate < 0.0, "strict convexity of psi gives psi(1) - psi(2)/2 < 0");
    let t = grid.times();
    let mut out = Vec::with_capacity(t.len());
    let mut x: f64 = StandardNormal.sample(rng);
    out.push(x);
    for w in t.windows(2) {
        let dt = w[1] - w[0];
        let rho = (rate * dt).exp();
        let z: f64 = StandardNormal.sample(rng);
        x = rho * x + (-(2.0 * rate * dt).exp_m1()).sqrt() * z;
        out.push(x);
    }
    out
}

/// `Cov(e^{ξ(t₁)}, e^{ξ(t₂)})`, also the covariance of the constant-horizon
/// Gaussian limit.
pub fn exp_covariance(model: &LevyModel, t1: f64, t2: f64) -> f64 {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let (p1, p2) = (model.psi(1.0), model.psi(2.0));
    (p2 * lo + p1 * (hi - lo)).exp() - (p1 * (lo + hi)).exp()
}

/// Zero-mean Gaussian vector with covariance `exp_covariance` on a grid.
#[derive(Debug, Clone)]
pub struct CltGaussian {
    dim: usize,
    /// Indices of coordinates with positive variance.
    active: Vec<usize>,
    /// `V·diag(√λ)` on the active block.
    factor: DMatrix<f64>,
}

impl CltGaussian {
    pub fn new(model: &LevyModel, grid: &Grid) -> Result<Self> {
        grid.require_nonnegative("the Gaussian limit")?;
        let t = grid.times();
        // exp_covariance(t, t) is exactly zero only at t = 0
        let active: Vec<usize> = (0..t.len())
            .filter(|&i| exp_covariance(model, t[i], t[i]) > 0.0)
            .collect();
        let k = active.len();
        let cov = DMatrix::from_fn(k, k, |i, j| exp_covariance(model, t[active[i]], t[active[j]]));
        let eig = SymmetricEigen::new(cov);
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = max.max(1.0);
        if k > 0 && min < -EIGEN_FLOOR * scale {
            return Err(Error::Numerical(format!(
                "covariance matrix is not positive semidefinite: eigenvalues in [{min:e}, {max:e}], condition {:e}",
                max / min.abs()
            )));
        }
        let mut factor = eig.eigenvectors;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            factor.column_mut(j).scale_mut(lambda.max(0.0).sqrt());
        }
        Ok(Self {
            dim: t.len(),
            active,
            factor,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.active.len();
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = vec![0.0; self.dim];
        for (i, &idx) in self.active.iter().enumerate() {
            out[idx] = (0..k).map(|j| self.factor[(i, j)] * z[j]).sum();
        }
        out
    }
}

pub fn sample_clt_gaussian<R: Rng + ?Sized>(model: &LevyModel, grid: &Grid, rng: &mut R) -> Result<Vec<f64>> {
    Ok(CltGaussian::new(model, grid)?.sample(rng))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::domain("alpha", alpha, "(0, 2)"));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain("tau", tau, "(0, +inf)"));
    }
    Ok(())
}

fn check_atom_budget(alpha: f64, tau: f64, max_atoms: u64) -> Result<()> {
    let expected = tau.powf(-alpha);
    if expected > max_atoms as f64 {
        return Err(Error::Config(format!(
            "truncation tau = {tau:e} needs about {expected:e} atoms, above the cap {max_atoms}; use a larger tau"
        )));
    }
    Ok(())
}

/// Points `U_i = Γ_i^{−1/α} > τ` in descending order.
pub fn sample_poisson_points<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
    tau: f64,
    max_atoms: u64,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    check_atom_budget(alpha, tau, max_atoms)?;
    let mut out = Vec::new();
    let mut gamma = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        gamma += e;
        let u = gamma.powf(-1.0 / alpha);
        if u <= tau {
            return Ok(out);
        }
        if out.len() as u64 >= max_atoms {
            return Err(Error::Config(format!(
                "more than {max_atoms} atoms above tau = {tau:e}; use a larger tau"
            )));
        }
        out.push(u);
    }
}

/// How far the series is summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeriesCutoff {
    /// Keep atoms `U_i > τ`.
    Tau(f64),
    /// Pick the largest `τ` whose residual bound is at most this value.
    Tolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub cutoff: SeriesCutoff,
    #[serde(default = "default_max_atoms")]
    pub max_atoms: u64,
}

fn default_max_atoms() -> u64 {
    DEFAULT_MAX_ATOMS
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            cutoff: SeriesCutoff::Tolerance(DEFAULT_SERIES_TOLERANCE),
            max_atoms: DEFAULT_MAX_ATOMS,
        }
    }
}

impl SeriesConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            cutoff: SeriesCutoff::Tau(tau),
            max_atoms: DEFAULT_MAX_ATOMS,
        }
    }

    pub fn resolve_tau(&self, model: &LevyModel, alpha: f64, grid: &Grid) -> Result<f64> {
        match self.cutoff {
            SeriesCutoff::Tau(tau) => {
                check_tau(tau)?;
                Ok(tau)
            }
            SeriesCutoff::Tolerance(eps) => tau_for_tolerance(model, alpha, eps, grid),
        }
    }
}

/// `(exponent of τ, constant)` such that the residual bound is `C·τ^p`.
fn residual_power(model: &LevyModel, alpha: f64, grid: &Grid) -> (f64, f64) {
    let drift = model.psi(alpha) / alpha;
    let max_exp = |rate: f64| {
        grid.times()
            .iter()
            .map(|&t| (rate * t).exp())
            .fold(0.0f64, f64::max)
    };
    if alpha < 1.0 {
        let c = alpha / (1.0 - alpha) * max_exp(model.psi(1.0) - drift);
        (1.0 - alpha, c)
    } else {
        let c = (alpha / (2.0 - alpha)).sqrt() * max_exp(0.5 * model.psi(2.0) - drift);
        (1.0 - 0.5 * alpha, c)
    }
}

/// Campbell bound on the discarded part of the series: the mean residual for
/// `α < 1` and the residual standard deviation for `α ≥ 1`.
pub fn residual_bound(model: &LevyModel, alpha: f64, tau: f64, grid: &Grid) -> Result<f64> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    let (p, c) = residual_power(model, alpha, grid);
    Ok(c * tau.powf(p))
}

/// Largest `τ` with `residual_bound(τ) ≤ eps`.
pub fn tau_for_tolerance(model: &LevyModel, alpha: f64, eps: f64, grid: &Grid) -> Result<f64> {
    check_alpha(alpha)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::domain("series tolerance", eps, "(0, +inf)"));
    }
    let (p, c) = residual_power(model, alpha, grid);
    Ok((eps / c).powf(1.0 / p))
}

/// Deterministic compensator subtracted from the truncated sum.
pub fn series_compensator(model: &LevyModel, alpha: f64, tau: f64, t: f64) -> f64 {
    if alpha < 1.0 {
        0.0
    } else if alpha == 1.0 {
        tau.ln()
    } else {
        let drift = model.psi(alpha) / alpha;
        -(alpha * tau.powf(1.0 - alpha) / (alpha - 1.0)) * ((model.psi(1.0) - drift) * t).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSample {
    pub path: Vec<f64>,
    pub tau: f64,
    pub bound: f64,
    pub atoms: u64,
}

/// One path of the truncated stable process on a grid with `t ≥ 0`.
///
/// Arrivals come from the substream `(sample, arrivals)`, and the Lévy path
/// attached to atom `i` from `(sample, atom, i)`, so a path is reproducible
/// from the seed and its index alone.
pub fn sample_stable_series(
    model: &LevyModel,
    alpha: f64,
    grid: &Grid,
    cfg: &SeriesConfig,
    family: &StreamFamily,
    sample: u64,
) -> Result<SeriesSample> {
    check_alpha(alpha)?;
    let tau = cfg.resolve_tau(model, alpha, grid)?;
    let mut levels = sample_stable_series_levels(model, alpha, grid, &[tau], cfg.max_atoms, family, sample)?;
    Ok(levels.pop().expect("one level requested"))
}

/// Nested truncations of the same realization, one per `τ` in `taus`
/// (strictly decreasing).
pub fn sample_stable_series_levels(
    model: &LevyModel,
    alpha: f64,
    grid: &Grid,
    taus: &[f64],
    max_atoms: u64,
    family: &StreamFamily,
    sample: u64,
) -> Result<Vec<SeriesSample>> {
    check_alpha(alpha)?;
    grid.require_nonnegative("the stable limit process")?;
    if taus.is_empty() {
        return Ok(Vec::new());
    }
    for &tau in taus {
        check_tau(tau)?;
    }
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "truncation levels must be strictly decreasing".into(),
        ));
    }
    let smallest = *taus.last().expect("non-empty");
    check_atom_budget(alpha, smallest, max_atoms)?;

    let times = grid.times();
    let drift = model.psi(alpha) / alpha;
    let needs_path = times.iter().any(|&t| t > 0.0);
    let mut arrivals = family.stream(&[tag::LIMIT, sample, tag::SERIES_ARRIVALS]);
    let mut acc = vec![0.0; times.len()];
    let mut xi = Vec::with_capacity(times.len());
    let mut out = Vec::with_capacity(taus.len());
    let mut gamma = 0.0;
    let mut atoms: u64 = 0;
    let mut level = 0;
    let snapshot = |acc: &[f64], tau: f64, atoms: u64, out: &mut Vec<SeriesSample>| -> Result<()> {
        let path = times
            .iter()
            .zip(acc)
            .map(|(&t, &a)| a + series_compensator(model, alpha, tau, t))
            .collect();
        out.push(SeriesSample {
            path,
            tau,
            bound: residual_bound(model, alpha, tau, grid)?,
            atoms,
        });
        Ok(())
    };
    loop {
        let e: f64 = Exp1.sample(&mut arrivals);
        gamma += e;
        let u = gamma.powf(-1.0 / alpha);
        while level < taus.len() && u <= taus[level] {
            snapshot(&acc, taus[level], atoms, &mut out)?;
            level += 1;
        }
        if level == taus.len() {
            return Ok(out);
        }
        if atoms >= max_atoms {
            return Err(Error::Config(format!(
                "more than {max_atoms} atoms above tau = {smallest:e}; use a larger tau"
            )));
        }
        xi.clear();
        if needs_path {
            let mut rng = family.stream(&[tag::LIMIT, sample, tag::SERIES_ATOM, atoms]);
            model.fill_path(times, &mut rng, &mut xi);
        } else {
            xi.resize(times.len(), 0.0);
        }
        for ((a, &x), &t) in acc.iter_mut().zip(&xi).zip(times) {
            *a += u * (x - drift * t).exp();
        }
        atoms += 1;
    }
}
