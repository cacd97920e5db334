//! Streaming simulation of `Z_N(t) = Σ_i exp ξ_i(s_N + t)` with
//! regime-dependent normalization and top order statistics of `W_{i,N}(0)`.
//!
//! Paths are generated in fixed chunks of `CHUNK` summands. Chunk `c` of
//! replicate `r` draws from substream `(ensemble, r, c)`, and chunk partial
//! sums are folded in chunk order, so the output depends on the seed and the
//! `EnsembleSpec` only.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::LevyModel;
use crate::limit::Grid;
use crate::regimes::{
    classify_with_override, GrowthRule, MomentMethod, NormalizationPlan, RegimeClass, RegimeOverride,
    StableScaling,
};
use crate::rng::{tag, StreamFamily};

/// Summands per chunk.
pub const CHUNK: u64 = 8192;
/// Chunks folded per parallel batch; bounds memory independently of `N`.
const BATCH: u64 = 64;
/// Default cap on `N·R·|grid|`.
pub const DEFAULT_BUDGET: u64 = 100_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub model: LevyModel,
    pub rule: GrowthRule,
    pub n: u64,
    pub replicates: u64,
    /// Offsets `t` relative to the horizon `s_N`.
    pub grid: Grid,
    pub seed: u64,
    #[serde(default)]
    pub top_k: usize,
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Truncated-moment method for the `λ = λ₁` centering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_method: Option<MomentMethod>,
    /// Forces the normalization of a regime instead of classifying the rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeOverride>,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl EnsembleSpec {
    pub fn new(model: LevyModel, rule: GrowthRule, n: u64, replicates: u64, grid: Grid, seed: u64) -> Self {
        Self {
            model,
            rule,
            n,
            replicates,
            grid,
            seed,
            top_k: 0,
            budget: DEFAULT_BUDGET,
            moment_method: None,
            regime: None,
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_regime(mut self, regime: RegimeOverride) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    /// Summand evaluations requested, `N·R·|grid|`.
    pub fn cost(&self) -> u128 {
        self.n as u128 * self.replicates as u128 * self.grid.len() as u128
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rule.validate()?;
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("at least one replicate is required".into()));
        }
        if self.cost() > self.budget as u128 {
            return Err(Error::Budget {
                requested: self.cost(),
                cap: self.budget as u128,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub regime: RegimeClass,
    pub n: u64,
    pub s: f64,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub plan: NormalizationPlan,
    /// `normalized[r][j]`: normalized `Z_N(t_j)` of replicate `r`.
    pub normalized: Vec<Vec<f64>>,
    /// `raw[r][j]`: `Z_N(t_j)`.
    pub raw: Vec<Vec<f64>>,
    /// `Z_N(0)` per replicate.
    pub raw_z0: Vec<f64>,
    /// Descending `W_{1:N}(0) ≥ … ≥ W_{k:N}(0)` per replicate.
    pub top: Vec<Vec<f64>>,
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.carry += other.carry;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// The `k` largest values seen so far.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Key>>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(Key(x)));
        } else if let Some(Reverse(Key(min))) = self.heap.peek() {
            if x > *min {
                self.heap.pop();
                self.heap.push(Reverse(Key(x)));
            }
        }
    }

    pub fn merge(&mut self, other: TopK) {
        for Reverse(Key(x)) in other.heap {
            self.push(x);
        }
    }

    /// Values in descending order.
    pub fn into_sorted(self) -> Vec<f64> {
        let mut v: Vec<f64> = self.heap.into_iter().map(|Reverse(Key(x))| x).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

struct Partial {
    norm: Vec<CompensatedSum>,
    raw: Vec<CompensatedSum>,
    top: TopK,
}

impl Partial {
    /// `raw` carries one extra slot for `Z_N(0)`.
    fn new(points: usize, k: usize) -> Self {
        Self {
            norm: vec![CompensatedSum::default(); points],
            raw: vec![CompensatedSum::default(); points + 1],
            top: TopK::new(k),
        }
    }

    fn merge(&mut self, other: Partial) {
        for (a, b) in self.norm.iter_mut().zip(&other.norm) {
            a.merge(b);
        }
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            a.merge(b);
        }
        self.top.merge(other.top);
    }
}

/// Precomputed per-point constants shared by all chunks.
struct Layout {
    /// Absolute times `s + t` at which each path is sampled, sorted.
    times: Vec<f64>,
    /// Position in `times` of each requested offset.
    requested: Vec<usize>,
    /// Position in `times` of offset zero.
    zero: usize,
    ln_scale: Vec<f64>,
    summand_center: Vec<f64>,
    /// `b_N(0)` when order statistics are tracked.
    top_shift: Option<f64>,
}

impl Layout {
    fn new(s: f64, grid: &Grid, plan: &NormalizationPlan, top_k: usize) -> Result<Self> {
        let mut offsets: Vec<f64> = grid.times().to_vec();
        if !offsets.contains(&0.0) {
            offsets.push(0.0);
            offsets.sort_by(f64::total_cmp);
        }
        let pos = |t: f64| offsets.iter().position(|&o| o == t).expect("offset present");
        let requested: Vec<usize> = grid.times().iter().map(|&t| pos(t)).collect();
        let zero = pos(0.0);
        let top_shift = if top_k > 0 {
            match &plan.stable {
                Some(sc) => Some(sc.b0),
                None => {
                    return Err(Error::Config(
                        "order statistics of W(0) need the fast regime, where b_N(0) is defined".into(),
                    ))
                }
            }
        } else {
            None
        };
        Ok(Self {
            times: offsets.iter().map(|&t| s + t).collect(),
            requested,
            zero,
            ln_scale: plan.points.iter().map(|p| p.ln_scale).collect(),
            summand_center: plan.points.iter().map(|p| p.summand_center).collect(),
            top_shift,
        })
    }
}

fn run_chunk(
    model: &LevyModel,
    layout: &Layout,
    family: &StreamFamily,
    rep: u64,
    chunk: u64,
    len: u64,
    k: usize,
) -> Partial {
    let mut rng = family.stream(&[tag::ENSEMBLE, rep, chunk]);
    let mut part = Partial::new(layout.requested.len(), k);
    let mut xi = Vec::with_capacity(layout.times.len());
    for _ in 0..len {
        xi.clear();
        model.fill_path(&layout.times, &mut rng, &mut xi);
        for (j, &idx) in layout.requested.iter().enumerate() {
            let x = xi[idx];
            part.norm[j].add((x - layout.ln_scale[j]).exp() - layout.summand_center[j]);
            part.raw[j].add(x.exp());
        }
        part.raw[layout.requested.len()].add(xi[layout.zero].exp());
        if let Some(b0) = layout.top_shift {
            part.top.push((xi[layout.zero] - b0).exp());
        }
    }
    part
}

fn run_replicate(
    model: &LevyModel,
    n: u64,
    layout: &Layout,
    family: &StreamFamily,
    rep: u64,
    k: usize,
) -> Partial {
    let chunks = n.div_ceil(CHUNK);
    let mut total = Partial::new(layout.requested.len(), k);
    let mut start = 0;
    while start < chunks {
        let end = (start + BATCH).min(chunks);
        let parts: Vec<Partial> = (start..end)
            .into_par_iter()
            .map(|c| run_chunk(model, layout, family, rep, c, CHUNK.min(n - c * CHUNK), k))
            .collect();
        for p in parts {
            total.merge(p);
        }
        start = end;
    }
    total
}

pub fn simulate_ensemble(spec: &EnsembleSpec) -> Result<EnsembleSummary> {
    spec.validate()?;
    let regime = classify_with_override(&spec.model, &spec.rule, spec.regime)?;
    let s = spec.rule.horizon(&spec.model, spec.n)?;
    if s + spec.grid.min() < 0.0 {
        return Err(Error::InvalidGrid(format!(
            "s_N + t must be >= 0; s_N = {s}, smallest offset {}",
            spec.grid.min()
        )));
    }
    let method = spec
        .moment_method
        .unwrap_or_else(|| MomentMethod::default_for(&spec.model, spec.seed));
    let plan = NormalizationPlan::build(&spec.model, &regime, spec.n, s, spec.grid.times(), method)?;
    let layout = Layout::new(s, &spec.grid, &plan, spec.top_k)?;
    let family = StreamFamily::new(spec.seed);
    let points = spec.grid.len();

    let per_rep: Vec<Partial> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| run_replicate(&spec.model, spec.n, &layout, &family, r, spec.top_k))
        .collect();

    let mut normalized = Vec::with_capacity(per_rep.len());
    let mut raw = Vec::with_capacity(per_rep.len());
    let mut raw_z0 = Vec::with_capacity(per_rep.len());
    let mut top = Vec::with_capacity(per_rep.len());
    for (r, p) in per_rep.into_iter().enumerate() {
        let y: Vec<f64> = p.norm.iter().map(CompensatedSum::value).collect();
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "replicate {r} produced a non-finite normalized value {bad}"
            )));
        }
        normalized.push(y);
        raw.push(p.raw[..points].iter().map(CompensatedSum::value).collect());
        raw_z0.push(p.raw[points].value());
        top.push(p.top.into_sorted());
    }
    Ok(EnsembleSummary {
        regime,
        n: spec.n,
        s,
        grid: spec.grid.times().to_vec(),
        seed: spec.seed,
        plan,
        normalized,
        raw,
        raw_z0,
        top,
    })
}

/// Per-replicate descending `W_{1:N}(0), …, W_{k:N}(0)`.
pub fn top_order_statistics(spec: &EnsembleSpec) -> Result<Vec<Vec<f64>>> {
    if spec.top_k == 0 {
        return Ok(vec![Vec::new(); spec.replicates as usize]);
    }
    Ok(simulate_ensemble(spec)?.top)
}

/// `W(t) = W(0)·e^{η(t)}` with `W(0) = e^{ξ(s) − b_N(0)}` and
/// `η(t) = ξ'(t) − (ψ(α)/α)t` for an independent copy `ξ'`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    pub w0: f64,
    pub eta: Vec<f64>,
}

impl Decomposition {
    pub fn w(&self) -> Vec<f64> {
        self.eta.iter().map(|e| self.w0 * e.exp()).collect()
    }
}

pub fn decompose_path<R: Rng + ?Sized>(
    model: &LevyModel,
    scaling: &StableScaling,
    s: f64,
    grid: &Grid,
    rng: &mut R,
) -> Result<Decomposition> {
    grid.require_nonnegative("the path decomposition")?;
    let w0 = (model.sample_increment(s, rng)? - scaling.b0).exp();
    let mut xi = Vec::with_capacity(grid.len());
    model.fill_path(grid.times(), rng, &mut xi);
    let eta = xi
        .iter()
        .zip(grid.times())
        .map(|(x, &t)| x - scaling.drift * t)
        .collect();
    Ok(Decomposition { w0, eta })
}

/// Random energy model at inverse temperature `β` with `2^bits` energies:
/// `N = 2^bits`, horizon `β²·bits`.
pub fn rem_spec(beta: f64, bits: u32, replicates: u64, seed: u64) -> Result<EnsembleSpec> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain("beta", beta, "(0, +inf)"));
    }
    if bits == 0 || bits > 40 {
        return Err(Error::Config(format!(
            "REM size 2^{bits} must have 1 <= bits <= 40"
        )));
    }
    let n = 1u64 << bits;
    let s = beta * beta * bits as f64;
    Ok(EnsembleSpec::new(
        LevyModel::standard_brownian(),
        GrowthRule::Table { pairs: vec![(n, s)] },
        n,
        replicates,
        Grid::new(vec![0.0])?,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regimes::{moments_exact, RegimeKind};
    use crate::special::norm_cdf;
    use crate::stats::ks_test;

    fn bm() -> LevyModel {
        LevyModel::standard_brownian()
    }

    fn g(t: &[f64]) -> Grid {
        Grid::new(t.to_vec()).unwrap()
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn top_k_matches_full_sort() {
        let fam = StreamFamily::new(1);
        let mut rng = fam.stream(&[0]);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let mut t = TopK::new(17);
        xs.iter().for_each(|&x| t.push(x));
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(t.into_sorted(), sorted[..17].to_vec());
        assert!(TopK::new(0).into_sorted().is_empty());
    }

    #[test]
    fn single_summand_slow_normalization() {
        let s = 1.3;
        let spec = EnsembleSpec::new(bm(), GrowthRule::Constant { s }, 1, 5, g(&[0.0]), 42)
            .with_regime(RegimeOverride::Slow);
        let out = simulate_ensemble(&spec).unwrap();
        assert_eq!(out.regime.kind, RegimeKind::Slow);
        let family = StreamFamily::new(42);
        for r in 0..5 {
            let mut rng = family.stream(&[tag::ENSEMBLE, r, 0]);
            let xi = bm().sample_increment(s, &mut rng).unwrap();
            let expected = (xi.exp() - (0.5 * s).exp()) / ((2.0 * s).exp() - s.exp()).sqrt();
            assert!((out.normalized[r as usize][0] - expected).abs() < 1e-12);
            assert!((out.raw_z0[r as usize] - xi.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn slow_raw_mean_matches_exact_moments() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 4.0 },
            10_000,
            200,
            g(&[0.0]),
            3,
        );
        let out = simulate_ensemble(&spec).unwrap();
        let m = moments_exact(&bm(), 10_000, out.s, 0.0).unwrap();
        let r = out.raw_z0.len() as f64;
        let mean = out.raw_z0.iter().sum::<f64>() / r;
        assert!((mean - m.mean).abs() <= 4.0 * (m.variance / r).sqrt());
        // normalized values have mean 0 and variance 1 at finite N
        let y: Vec<f64> = out.normalized.iter().map(|v| v[0]).collect();
        let ym = y.iter().sum::<f64>() / r;
        assert!(ym.abs() <= 4.0 / r.sqrt());
    }

    #[test]
    fn slow_regime_is_gaussian() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 4.0 },
            4096,
            400,
            g(&[0.0]),
            4,
        );
        let out = simulate_ensemble(&spec).unwrap();
        let y: Vec<f64> = out.normalized.iter().map(|v| v[0]).collect();
        assert!(ks_test(&y, norm_cdf).unwrap().p_value > 0.001);
    }

    #[test]
    fn results_do_not_depend_on_threads() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 0.25 },
            3 * CHUNK + 17,
            6,
            g(&[0.0, 0.5]),
            5,
        )
        .with_top_k(5);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_ensemble(&spec)).unwrap();
        let b = four.install(|| simulate_ensemble(&spec)).unwrap();
        assert_eq!(a, b);
        for r in 0..6 {
            assert_eq!(a.normalized[r][0].to_bits(), b.normalized[r][0].to_bits());
        }
    }

    #[test]
    fn top_k_agrees_with_direct_sort() {
        let n = 1000;
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Table {
                pairs: vec![(n, 40.0)],
            },
            n,
            3,
            g(&[0.0]),
            8,
        )
        .with_top_k(10);
        let out = simulate_ensemble(&spec).unwrap();
        let b0 = out.plan.stable.unwrap().b0;
        let family = StreamFamily::new(8);
        for r in 0..3u64 {
            let mut rng = family.stream(&[tag::ENSEMBLE, r, 0]);
            let mut w: Vec<f64> = (0..n)
                .map(|_| (bm().sample_increment(40.0, &mut rng).unwrap() - b0).exp())
                .collect();
            w.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(out.top[r as usize], w[..10].to_vec());
        }
        assert!(top_order_statistics(&spec.clone().with_top_k(0))
            .unwrap()
            .iter()
            .all(Vec::is_empty));
    }

    #[test]
    fn top_k_requires_fast_regime() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 4.0 },
            100,
            1,
            g(&[0.0]),
            1,
        )
        .with_top_k(3);
        assert!(simulate_ensemble(&spec).is_err());
    }

    #[test]
    fn budget_and_grid_errors() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Proportional { lambda: 4.0 },
            1000,
            1000,
            g(&[0.0]),
            1,
        )
        .with_budget(10);
        assert!(matches!(simulate_ensemble(&spec), Err(Error::Budget { .. })));
        let spec = EnsembleSpec::new(bm(), GrowthRule::Constant { s: 1.0 }, 10, 1, g(&[-2.0, 0.0]), 1);
        assert!(matches!(simulate_ensemble(&spec), Err(Error::InvalidGrid(_))));
        // fast regime with N too small for B_N
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Table {
                pairs: vec![(2, 80.0)],
            },
            2,
            1,
            g(&[0.0]),
            1,
        );
        assert!(matches!(simulate_ensemble(&spec), Err(Error::Domain { .. })));
    }

    #[test]
    fn zero_regime_uses_clt_scaling() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Constant { s: 0.0 },
            2000,
            300,
            g(&[0.0, 1.0]),
            6,
        );
        let out = simulate_ensemble(&spec).unwrap();
        // G(0) = 0 exactly in the limit; at finite N the t = 0 value is exactly 0 too
        assert!(out.normalized.iter().all(|v| v[0].abs() < 1e-12));
        let y: Vec<f64> = out.normalized.iter().map(|v| v[1]).collect();
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let reference = 2f64.exp() - 1f64.exp();
        assert!((var / reference - 1.0).abs() < 0.35);
    }

    #[test]
    fn decomposition_moments() {
        let m = bm();
        let sc = StableScaling::new(&m, 0.5, 100_000, 92.1).unwrap();
        let family = StreamFamily::new(9);
        let mut rng = family.stream(&[0]);
        let grid = g(&[0.0, 1.0]);
        let n = 200_000;
        let mut mart = Vec::with_capacity(n);
        let mut plain = Vec::with_capacity(n);
        for _ in 0..n {
            let d = decompose_path(&m, &sc, 92.1, &grid, &mut rng).unwrap();
            assert_eq!(d.eta[0], 0.0);
            assert_eq!(d.w()[0], d.w0);
            mart.push((0.5 * d.eta[1]).exp());
            plain.push(d.eta[1].exp());
        }
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            (mean, sd / (v.len() as f64).sqrt())
        };
        let (m1, se1) = stats(&mart);
        assert!((m1 - 1.0).abs() <= 3.0 * se1);
        let (m2, se2) = stats(&plain);
        assert!((m2 - 0.25f64.exp()).abs() <= 3.0 * se2);
    }

    #[test]
    fn rem_preset_mean() {
        let spec = rem_spec(0.4, 12, 400, 10).unwrap();
        let out = simulate_ensemble(&spec).unwrap();
        assert_eq!(out.regime.kind, RegimeKind::Slow);
        let m = moments_exact(&bm(), 4096, 0.16 * 12.0, 0.0).unwrap();
        assert!((m.mean - 4096.0 * (0.08f64 * 12.0).exp()).abs() < 1e-9);
        let r = out.raw_z0.len() as f64;
        let mean = out.raw_z0.iter().sum::<f64>() / r;
        assert!((mean - m.mean).abs() <= 4.0 * (m.variance / r).sqrt());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = EnsembleSpec::new(
            bm(),
            GrowthRule::Critical { theta: 0.5 },
            100,
            2,
            g(&[0.0, 0.5]),
            7,
        )
        .with_top_k(3);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<EnsembleSpec>(&text).unwrap(), spec);
        assert!(serde_json::from_str::<EnsembleSpec>(&text.replace("\"seed\"", "\"sed\"")).is_err());
    }
}
