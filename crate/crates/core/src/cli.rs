//! Run configurations, command orchestration, and artifact emission.
//!
//! A run reads one JSON configuration, executes a single command and writes
//! its artifacts into the output directory. Artifacts never contain
//! timestamps or thread counts, so identical configurations give
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ensemble::{rem_spec, simulate_ensemble, EnsembleSpec, EnsembleSummary, DEFAULT_BUDGET};
use crate::error::{Error, Result};
use crate::levy::LevyModel;
use crate::limit::{sample_ou, sample_stable_series, CltGaussian, Grid, SeriesConfig};
use crate::regimes::{
    classify_with_override, fast_regime, moments_exact, GrowthRule, MomentMethod, RegimeKind, RegimeOverride,
};
use crate::rng::{entropy_seed, tag, StreamFamily};
use crate::stats::{
    order_stats_reports, verify_bahadur_rao, verify_covariance, verify_truncated_moments, CheckReport,
    CovarianceMode, OrderStatsPlan, PassRule, TruncatedPart,
};

pub const DEFAULT_OUT_DIR: &str = "geolevy-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Classify,
    Rate,
    Simulate,
    LimitSample,
    Verify,
    RemPreset,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Rate => "rate",
            Command::Simulate => "simulate",
            Command::LimitSample => "limit-sample",
            Command::Verify => "verify",
            Command::RemPreset => "rem-preset",
        }
    }
}

/// Ensemble size and observation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    pub n: u64,
    pub replicates: u64,
    #[serde(default = "zero_grid")]
    pub grid: Grid,
    #[serde(default)]
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_method: Option<MomentMethod>,
}

fn zero_grid() -> Grid {
    Grid::new(vec![0.0]).expect("single point grid")
}

/// Points at which the `rate` command evaluates `I`, `I⁻¹` and `α(λ)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub inverse: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitProcess {
    Ou,
    Clt,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitParams {
    pub process: LimitProcess,
    pub grid: Grid,
    pub samples: u64,
    /// Stable index; derived from the growth rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub series: SeriesConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemParams {
    pub beta: f64,
    /// `log₂ N`.
    pub n: u32,
    #[serde(default = "default_rem_replicates")]
    pub replicates: u64,
}

fn default_rem_replicates() -> u64 {
    200
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_samples() -> u64 {
    100_000
}

/// One requested verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifySelection {
    TruncatedMoments {
        kappa: f64,
        part: TruncatedPart,
        x: Vec<f64>,
        /// Target `α` with `b = ψ'(α)x` for the upper and lower parts.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<MomentMethod>,
    },
    BahadurRao {
        beta: f64,
        horizons: Vec<f64>,
        tolerances: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<MomentMethod>,
    },
    OrderStats {
        plan: OrderStatsPlan,
    },
    Covariance {
        mode: CovarianceMode,
        grid: Grid,
        #[serde(default = "default_samples")]
        samples: u64,
    },
}

impl VerifySelection {
    pub fn name(&self) -> &'static str {
        match self {
            VerifySelection::TruncatedMoments { .. } => "truncated_moments",
            VerifySelection::BahadurRao { .. } => "bahadur_rao",
            VerifySelection::OrderStats { .. } => "order_stats",
            VerifySelection::Covariance { .. } => "covariance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<LevyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<LimitParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verify: Vec<VerifySelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rem: Option<RemParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Parses a configuration from inline JSON.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    Ok(serde_json::from_str(text)?)
}

/// Inline JSON when the argument starts with `{`, otherwise a file path.
pub fn load_config(arg: &str) -> Result<RunConfig> {
    if arg.trim_start().starts_with('{') {
        parse_config(arg)
    } else {
        parse_config(&fs::read_to_string(arg)?)
    }
}

fn require<'a, T>(field: &'a Option<T>, name: &str, command: Command) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| Error::Schema(format!("command `{}` needs the `{name}` section", command.name())))
}

/// Command-line overrides applied on top of a configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub budget: Option<u64>,
    /// Restricts `verify` to checks with these names.
    pub checks: Vec<String>,
}

impl RunConfig {
    /// Applies overrides and fills a missing seed. Returns whether the seed
    /// was generated.
    pub fn resolve(&mut self, o: &Overrides) -> bool {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(b) = o.budget {
            self.budget = Some(b);
        }
        if !o.checks.is_empty() {
            self.verify.retain(|v| o.checks.iter().any(|c| c == v.name()));
        }
        if self.seed.is_none() {
            self.seed = Some(entropy_seed());
            return true;
        }
        false
    }

    /// The configuration as recorded in artifacts: everything except the
    /// output location.
    pub fn recorded(&self) -> RunConfig {
        RunConfig {
            out: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON of the recorded configuration.
    pub fn spec_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.recorded())?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn seed_value(&self) -> u64 {
        self.seed.expect("seed resolved before running")
    }

    fn budget_value(&self) -> u64 {
        self.budget.unwrap_or(DEFAULT_BUDGET)
    }

    fn model(&self) -> Result<&LevyModel> {
        let m = require(&self.model, "model", self.command)?;
        m.validate()?;
        Ok(m)
    }

    fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        let params = require(&self.ensemble, "ensemble", self.command)?;
        let rule = require(&self.growth, "growth", self.command)?;
        Ok(EnsembleSpec {
            model: *self.model()?,
            rule: rule.clone(),
            n: params.n,
            replicates: params.replicates,
            grid: params.grid.clone(),
            seed: self.seed_value(),
            top_k: params.top_k,
            budget: self.budget_value(),
            moment_method: params.moment_method,
            regime: self.regime,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Full round-trip decimal representation (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_header(hash: &str, seed: u64, extra: &[(&str, String)], columns: &str) -> String {
    let mut s = format!("# spec_sha256={hash}\n# seed={seed}\n");
    for (k, v) in extra {
        let _ = writeln!(s, "# {k}={v}");
    }
    s.push_str(columns);
    s.push('\n');
    s
}

/// Pass/fail counts of an emitted report set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReportCounts {
    pub passed: usize,
    pub failed: usize,
}

/// Writes `reports.jsonl` and `summary.csv` into `dir`. An empty report list
/// gives empty files.
pub fn emit_report(reports: &[CheckReport], dir: &Path) -> Result<ReportCounts> {
    fs::create_dir_all(dir)?;
    let mut counts = ReportCounts::default();
    let mut jsonl = String::new();
    let mut rows = String::new();
    for r in reports {
        if r.passed {
            counts.passed += 1;
        } else {
            counts.failed += 1;
        }
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        for (i, (o, re)) in r.observed.iter().zip(&r.reference).enumerate() {
            let tol = r.tolerance.get(i).copied().unwrap_or(0.0);
            let _ = writeln!(
                rows,
                "{}[{i}],{},{},{},{}",
                r.name,
                fmt_f64(*o),
                fmt_f64(*re),
                fmt_f64(tol),
                r.passed
            );
        }
    }
    let summary = if reports.is_empty() {
        String::new()
    } else {
        format!(
            "# passed={} failed={}\ncheck,observed,reference,tolerance,pass\n{rows}",
            counts.passed, counts.failed
        )
    };
    fs::write(dir.join("reports.jsonl"), jsonl)?;
    fs::write(dir.join("summary.csv"), summary)?;
    Ok(counts)
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub command: &'static str,
    pub seed: u64,
    pub spec_sha256: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
    pub checks: Option<ReportCounts>,
}

impl RunOutcome {
    /// Process exit status: 1 if any check failed, 0 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.checks {
            Some(c) if c.failed > 0 => 1,
            _ => 0,
        }
    }
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn reports(&mut self, reports: &[CheckReport]) -> Result<ReportCounts> {
        let counts = emit_report(reports, &self.dir)?;
        self.artifacts.push(self.dir.join("reports.jsonl"));
        self.artifacts.push(self.dir.join("summary.csv"));
        Ok(counts)
    }
}

/// Executes a resolved configuration (seed set) and writes its artifacts.
pub fn run_config(cfg: &RunConfig) -> Result<RunOutcome> {
    if cfg.seed.is_none() {
        return Err(Error::Schema("seed must be resolved before running".into()));
    }
    let hash = cfg.spec_hash()?;
    let seed = cfg.seed_value();
    let mut w = Writer::new(cfg.out_dir())?;
    w.json("config.json", &serde_json::to_value(cfg.recorded())?)?;
    let mut checks = None;
    let summary = match cfg.command {
        Command::Classify => {
            let model = cfg.model()?;
            let rule = require(&cfg.growth, "growth", cfg.command)?;
            let class = classify_with_override(model, rule, cfg.regime)?;
            let v = serde_json::to_value(class)?;
            w.json("classify.json", &v)?;
            v
        }
        Command::Rate => {
            let v = rate_summary(cfg.model()?, cfg.rate.clone().unwrap_or_default())?;
            w.json("rate.json", &v)?;
            v
        }
        Command::Simulate => {
            let spec = cfg.ensemble_spec()?;
            let summary = simulate_ensemble(&spec)?;
            write_ensemble(&mut w, &hash, &summary)?;
            ensemble_overview(&summary)
        }
        Command::LimitSample => limit_sample(cfg, &hash, &mut w)?,
        Command::Verify => {
            let reports = run_verify(cfg)?;
            let counts = w.reports(&reports)?;
            checks = Some(counts);
            json!({ "passed": counts.passed, "failed": counts.failed })
        }
        Command::RemPreset => {
            let p = require(&cfg.rem, "rem", cfg.command)?;
            let spec = rem_spec(p.beta, p.n, p.replicates, seed)?.with_budget(cfg.budget_value());
            let summary = simulate_ensemble(&spec)?;
            write_ensemble(&mut w, &hash, &summary)?;
            let report = rem_mean_report(&spec, &summary)?;
            let counts = w.reports(std::slice::from_ref(&report))?;
            checks = Some(counts);
            let mut v = ensemble_overview(&summary);
            v["beta"] = json!(p.beta);
            v["mean_check"] = serde_json::to_value(&report)?;
            v
        }
    };
    w.json("summary.json", &summary)?;
    Ok(RunOutcome {
        command: cfg.command.name(),
        seed,
        spec_sha256: hash,
        artifacts: w.artifacts,
        summary,
        checks,
    })
}

fn rate_summary(model: &LevyModel, p: RateParams) -> Result<Value> {
    let profile = model.rate_profile();
    let (lambda1, lambda2) = profile.critical_points();
    let (beta0, beta_inf) = model.domain_bounds();
    let mut evals = Vec::new();
    for &b in &p.beta {
        let r = profile.eval(b)?;
        evals.push(json!({ "beta": b, "value": r.value, "slope": r.slope }));
    }
    let mut inverses = Vec::new();
    for &y in &p.inverse {
        inverses.push(json!({ "y": y, "beta": profile.inverse(y)? }));
    }
    let mut alphas = Vec::new();
    for &l in &p.lambda {
        let alpha = match fast_regime(model, l)? {
            RegimeKind::Fast { alpha, .. } => alpha,
            _ => unreachable!("fast_regime returns Fast"),
        };
        alphas.push(json!({ "lambda": l, "alpha": alpha }));
    }
    Ok(json!({
        "model": model,
        "beta0": beta0,
        "beta_inf": beta_inf.to_string(),
        "lambda1": lambda1,
        "lambda2": lambda2,
        "rate": evals,
        "inverse": inverses,
        "alpha": alphas,
    }))
}

fn ensemble_overview(s: &EnsembleSummary) -> Value {
    let r = s.raw_z0.len() as f64;
    json!({
        "regime": s.regime,
        "n": s.n,
        "s": s.s,
        "seed": s.seed,
        "replicates": s.raw_z0.len(),
        "normalization": s.plan,
        "raw_z0_mean": s.raw_z0.iter().sum::<f64>() / r,
    })
}

fn write_ensemble(w: &mut Writer, hash: &str, s: &EnsembleSummary) -> Result<()> {
    let mut extra = vec![
        ("regime", serde_json::to_string(&s.regime)?),
        ("n", s.n.to_string()),
        ("s", fmt_f64(s.s)),
    ];
    if s.regime.lattice_warning {
        extra.push(("warning", "lattice model in the fast regime".into()));
    }
    let mut text = csv_header(hash, s.seed, &extra, "replicate_id,t,normalized_value,raw_value");
    for (r, (y, z)) in s.normalized.iter().zip(&s.raw).enumerate() {
        for (j, &t) in s.grid.iter().enumerate() {
            let _ = writeln!(text, "{r},{},{},{}", fmt_f64(t), fmt_f64(y[j]), fmt_f64(z[j]));
        }
    }
    w.write("ensemble.csv", &text)?;
    if s.top.iter().any(|t| !t.is_empty()) {
        let mut text = csv_header(hash, s.seed, &extra, "replicate_id,rank,value");
        for (r, top) in s.top.iter().enumerate() {
            for (k, v) in top.iter().enumerate() {
                let _ = writeln!(text, "{r},{},{}", k + 1, fmt_f64(*v));
            }
        }
        w.write("order_stats.csv", &text)?;
    }
    Ok(())
}

fn rem_mean_report(spec: &EnsembleSpec, s: &EnsembleSummary) -> Result<CheckReport> {
    let m = moments_exact(&spec.model, spec.n, s.s, 0.0)?;
    let r = s.raw_z0.len() as f64;
    let mean = s.raw_z0.iter().sum::<f64>() / r;
    let se = (m.variance / r).sqrt();
    Ok(CheckReport::new(
        "rem.mean",
        json!({ "n": spec.n, "s": s.s, "replicates": s.raw_z0.len() }),
        vec![mean],
        vec![m.mean],
        vec![4.0 * se],
        vec![se],
        PassRule::AllWithin,
        Some(spec.seed),
    ))
}

fn limit_sample(cfg: &RunConfig, hash: &str, w: &mut Writer) -> Result<Value> {
    let model = cfg.model()?;
    let p = require(&cfg.limit, "limit", cfg.command)?;
    let seed = cfg.seed_value();
    let family = StreamFamily::new(seed);
    let cost = p.samples as u128 * p.grid.len() as u128;
    if cost > cfg.budget_value() as u128 {
        return Err(Error::Budget {
            requested: cost,
            cap: cfg.budget_value() as u128,
        });
    }
    let mut extra: Vec<(&str, String)> = Vec::new();
    let mut paths: Vec<Vec<f64>> = Vec::with_capacity(p.samples as usize);
    let mut meta = json!({ "process": p.process, "samples": p.samples });
    match p.process {
        LimitProcess::Ou => {
            for i in 0..p.samples {
                let mut rng = family.stream(&[tag::LIMIT, i]);
                paths.push(sample_ou(model, &p.grid, &mut rng));
            }
        }
        LimitProcess::Clt => {
            let g = CltGaussian::new(model, &p.grid)?;
            for i in 0..p.samples {
                let mut rng = family.stream(&[tag::LIMIT, i]);
                paths.push(g.sample(&mut rng));
            }
        }
        LimitProcess::Stable => {
            let alpha = match p.alpha {
                Some(a) => a,
                None => {
                    let rule = require(&cfg.growth, "growth", cfg.command)?;
                    classify_with_override(model, rule, cfg.regime)?
                        .alpha()
                        .ok_or_else(|| {
                            Error::Config("the growth rule is not in the fast regime; set limit.alpha".into())
                        })?
                }
            };
            let tau = p.series.resolve_tau(model, alpha, &p.grid)?;
            let cfg_tau = SeriesConfig {
                cutoff: crate::limit::SeriesCutoff::Tau(tau),
                max_atoms: p.series.max_atoms,
            };
            let mut bound = 0.0;
            for i in 0..p.samples {
                let s = sample_stable_series(model, alpha, &p.grid, &cfg_tau, &family, i)?;
                bound = s.bound;
                paths.push(s.path);
            }
            extra.push(("alpha", fmt_f64(alpha)));
            extra.push(("tau", fmt_f64(tau)));
            extra.push(("achieved_bound", fmt_f64(bound)));
            meta["alpha"] = json!(alpha);
            meta["tau"] = json!(tau);
            meta["achieved_bound"] = json!(bound);
        }
    }
    let mut text = csv_header(hash, seed, &extra, "run_id,t,value");
    for (i, path) in paths.iter().enumerate() {
        for (&t, &v) in p.grid.times().iter().zip(path) {
            let _ = writeln!(text, "{i},{},{}", fmt_f64(t), fmt_f64(v));
        }
    }
    w.write("limit.csv", &text)?;
    Ok(meta)
}

/// Runs every selected verification with a per-check seed derived from the
/// run seed and the selection index.
pub fn run_verify(cfg: &RunConfig) -> Result<Vec<CheckReport>> {
    let model = cfg.model()?;
    let seed = cfg.seed_value();
    let mut out = Vec::new();
    for (i, sel) in cfg.verify.iter().enumerate() {
        let check_seed = StreamFamily::new(seed).sub_seed(&[tag::CHECK, i as u64]);
        let default_mc = |m: Option<MomentMethod>| m.unwrap_or(MomentMethod::default_for(model, check_seed));
        match sel {
            VerifySelection::TruncatedMoments {
                kappa,
                part,
                x,
                alpha,
                tolerance,
                method,
            } => {
                let a = match part {
                    TruncatedPart::Central { .. } => 0.0,
                    _ => alpha.ok_or_else(|| Error::Schema("upper and lower parts need `alpha`".into()))?,
                };
                let sched = part.schedule(model, *kappa, a, x);
                out.push(verify_truncated_moments(
                    model,
                    *kappa,
                    *part,
                    &sched,
                    default_mc(*method),
                    *tolerance,
                )?);
            }
            VerifySelection::BahadurRao {
                beta,
                horizons,
                tolerances,
                method,
            } => out.push(verify_bahadur_rao(
                model,
                *beta,
                horizons,
                tolerances,
                default_mc(*method),
            )?),
            VerifySelection::OrderStats { plan } => {
                let mut spec = cfg.ensemble_spec()?;
                spec.seed = check_seed;
                if spec.top_k == 0 {
                    return Err(Error::Schema("order_stats needs ensemble.top_k > 0".into()));
                }
                let summary = simulate_ensemble(&spec)?;
                out.extend(order_stats_reports(&summary, plan)?);
            }
            VerifySelection::Covariance { mode, grid, samples } => {
                out.push(verify_covariance(model, grid, *mode, *samples, check_seed)?)
            }
        }
    }
    Ok(out)
}
