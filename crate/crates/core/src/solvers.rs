//! Thresholding solvers for `min rank(X) s.t. A(X) = b`.
//!
//! All schemes share one iteration: a gradient step
//! `Y = X - tau A*(A X - b)` followed by a spectral operator on `Y`:
//!
//! | solver  | operator                      | continuation |
//! |---------|-------------------------------|--------------|
//! | FPC     | `S_{tau mu}(Y)` (full SVD)    | no           |
//! | IHT     | `R_r(Y)`                      | no           |
//! | IHTMS   | `R_r(S_mu(Y))`                | no           |
//! | FPCAr   | `S_mu(R_r(Y))`                | yes          |
//! | FPCA    | `S_{tau mu}(R_r(Y))`, r adaptive | yes       |
//!
//! IHT and IHTMS accept an adaptive rank as well.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::approx_svd::{self, SamplerParams};
use crate::bench::metrics;
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, DenseMatrix, SvdFactors, Truncation};
use crate::rng::derive_seed;
use crate::sensing::{spectral_upper_bound, LinearMap, MapKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Rank given in advance.
    Fixed(usize),
    /// Rank chosen every iteration, capped by `r_max`. `None` uses the largest
    /// rank with `r (m + n - r) < p`.
    Adaptive(Option<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdMode {
    #[default]
    Exact,
    MonteCarlo,
}

/// Rule for growing the adaptive rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankIncrease {
    /// `r += 1` when `||g^k||_F > grad_blowup_factor * ||g^{k-1}||_F`.
    #[default]
    GradientBlowup,
    /// `r += 1` after `violation_limit` iterations where
    /// `||X^{k+1} - X^k||_F > ||Y^{k+1} - Y^k||_F`.
    NonExpansiveViolations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Step size. `None`: [`default_step`] for the thresholding solvers,
    /// `1/lambda_max(A*A)` for FPC.
    pub tau: Option<f64>,
    /// Fixed shrinkage for FPC and IHTMS. `None` uses `mu_bar`.
    pub mu: Option<f64>,
    pub mu_bar: f64,
    pub eta_mu: f64,
    /// First continuation value. `None` uses `eta_mu * sigma_1(A*(b))`.
    pub mu_1: Option<f64>,
    pub xtol: f64,
    pub eps_s: f64,
    /// Sampled columns for the Monte Carlo SVD. `None` uses `2 r_max - 2`.
    pub c_s: Option<usize>,
    pub max_inner_iters: usize,
    pub max_total_iters: usize,
    pub rank_mode: RankMode,
    pub svd_mode: SvdMode,
    pub grad_blowup_factor: f64,
    pub rank_increase: RankIncrease,
    pub violation_limit: usize,
    pub seed: u64,
    /// Keep every iterate in the trace.
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tau: None,
            mu: None,
            mu_bar: 1e-8,
            eta_mu: 0.25,
            mu_1: None,
            xtol: 1e-6,
            eps_s: 0.01,
            c_s: None,
            max_inner_iters: 500,
            max_total_iters: 10_000,
            rank_mode: RankMode::Adaptive(None),
            svd_mode: SvdMode::Exact,
            grad_blowup_factor: 10.0,
            rank_increase: RankIncrease::GradientBlowup,
            violation_limit: 10,
            seed: 0,
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn fixed_rank(r: usize) -> Self {
        SolverConfig { rank_mode: RankMode::Fixed(r), ..Default::default() }
    }

    pub fn adaptive() -> Self {
        SolverConfig { rank_mode: RankMode::Adaptive(None), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(invalid(format!("tau must be positive, got {t}")));
            }
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(invalid(format!("mu must be nonnegative, got {mu}")));
            }
        }
        if !(self.eta_mu > 0.0 && self.eta_mu < 1.0) {
            return Err(invalid(format!("eta_mu must lie in (0,1), got {}", self.eta_mu)));
        }
        if !(self.mu_bar > 0.0 && self.mu_bar.is_finite()) {
            return Err(invalid(format!("mu_bar must be positive, got {}", self.mu_bar)));
        }
        if let Some(mu1) = self.mu_1 {
            if !(mu1 >= self.mu_bar && mu1.is_finite()) {
                return Err(invalid(format!("mu_1 ({mu1}) must be at least mu_bar ({})", self.mu_bar)));
            }
        }
        if !(self.xtol > 0.0) {
            return Err(invalid(format!("xtol must be positive, got {}", self.xtol)));
        }
        if !(self.eps_s > 0.0 && self.eps_s < 1.0) {
            return Err(invalid(format!("eps_s must lie in (0,1), got {}", self.eps_s)));
        }
        if self.c_s == Some(0) {
            return Err(invalid("c_s must be positive"));
        }
        if self.max_inner_iters == 0 || self.max_total_iters == 0 {
            return Err(invalid("iteration caps must be positive"));
        }
        if !(self.grad_blowup_factor > 1.0) {
            return Err(invalid("grad_blowup_factor must exceed 1"));
        }
        match self.rank_mode {
            RankMode::Fixed(0) | RankMode::Adaptive(Some(0)) => Err(invalid("rank must be positive")),
            _ => Ok(()),
        }
    }
}

/// A measurement problem, optionally with the ground truth for error tracking.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub map: &'a LinearMap,
    pub b: &'a DVector<f64>,
    pub truth: Option<&'a DenseMatrix>,
    pub x0: Option<&'a DenseMatrix>,
}

impl<'a> Problem<'a> {
    pub fn new(map: &'a LinearMap, b: &'a DVector<f64>) -> Self {
        Problem { map, b, truth: None, x0: None }
    }

    pub fn with_truth(mut self, m: &'a DenseMatrix) -> Self {
        self.truth = Some(m);
        self
    }

    /// Starting point; the zero matrix when unset.
    pub fn with_start(mut self, x0: &'a DenseMatrix) -> Self {
        self.x0 = Some(x0);
        self
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = self.map.shape();
        if self.b.len() != self.map.measurements() {
            return Err(Error::ShapeMismatch {
                expected: format!("b of length {}", self.map.measurements()),
                got: format!("length {}", self.b.len()),
            });
        }
        for x in self.truth.iter().chain(self.x0.iter()) {
            if x.shape() != (m, n) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} x {n}"),
                    got: format!("{} x {}", x.nrows(), x.ncols()),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mu: f64,
    /// Rank cap in effect for this iteration (`min(m, n)` for FPC).
    pub rank: usize,
    /// `||A X^{k+1} - b||_2`.
    pub residual: f64,
    /// `||X^{k+1} - X^k||_F / max(1, ||X^k||_F)`.
    pub step: f64,
    /// `||X^{k+1} - M||_F` when the truth is known.
    pub abs_err: Option<f64>,
    /// `||X^{k+1} - M||_F / ||M||_F` when the truth is known.
    pub rel_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub solver: String,
    pub records: Vec<IterRecord>,
    pub x: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
    /// `X^1, X^2, ...` when `record_iterates` is set.
    pub iterates: Vec<DenseMatrix>,
}

impl SolveTrace {
    pub fn final_rel_err(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.rel_err)
    }

    /// CSV with header `iter,mu,rank,residual,step,rel_err`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,mu,rank,residual,step,rel_err\n");
        for r in &self.records {
            let rel = r.rel_err.map(|e| format!("{e:.17e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.17e},{},{:.17e},{:.17e},{}\n", r.iter, r.mu, r.rank, r.residual, r.step, rel));
        }
        out
    }

    /// CSV with header `iter,log10_abs_err`; empty body when no truth was given.
    pub fn decay_csv(&self) -> String {
        let mut out = String::from("iter,log10_abs_err\n");
        for r in &self.records {
            if let Some(e) = r.abs_err {
                out.push_str(&format!("{},{:.17e}\n", r.iter, e.log10()));
            }
        }
        out
    }
}

/// Continuation schedule `mu_{j+1} = max(mu_j eta, mu_bar)`, ending exactly at `mu_bar`.
pub fn mu_schedule(mu_1: f64, eta_mu: f64, mu_bar: f64) -> Result<Vec<f64>> {
    if !(mu_bar > 0.0 && mu_1 >= mu_bar && mu_1.is_finite()) {
        return Err(invalid(format!("need mu_1 ({mu_1}) >= mu_bar ({mu_bar}) > 0")));
    }
    if !(eta_mu > 0.0 && eta_mu < 1.0) {
        return Err(invalid(format!("eta_mu must lie in (0,1), got {eta_mu}")));
    }
    let mut out = vec![mu_1];
    let mut mu = mu_1;
    while mu > mu_bar {
        mu = (mu * eta_mu).max(mu_bar);
        out.push(mu);
    }
    Ok(out)
}

/// Rank for the next iteration: the number of `prev_sigma` entries above
/// `eps_s * prev_sigma[0]`, clamped to `[1, r_max]`, plus one (still clamped)
/// when the last gradient norm exceeds `blowup` times the one before it.
pub fn rank_heuristic(prev_sigma: &[f64], eps_s: f64, grad_norms: &[f64], r_max: usize, blowup: f64) -> usize {
    let r_max = r_max.max(1);
    let base = match prev_sigma.first() {
        Some(&s1) if s1 > 0.0 => prev_sigma.iter().filter(|&&s| s > eps_s * s1).count(),
        _ => 1,
    };
    let mut r = base.clamp(1, r_max);
    if let [.., prev, last] = grad_norms {
        if *last > blowup * *prev {
            r = (r + 1).min(r_max);
        }
    }
    r
}

/// Solver family, named as in the result tables: the `r` suffix marks a
/// given rank, its absence an adaptively chosen one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    Fpc,
    IhtR,
    Iht,
    IhtmsR,
    Ihtms,
    FpcaR,
    Fpca,
}

impl SolverKind {
    /// The six thresholding modes compared in the recovery tables.
    pub const TABLE: [SolverKind; 6] =
        [SolverKind::IhtR, SolverKind::Iht, SolverKind::IhtmsR, SolverKind::Ihtms, SolverKind::FpcaR, SolverKind::Fpca];

    pub fn is_adaptive(self) -> bool {
        matches!(self, SolverKind::Iht | SolverKind::Ihtms | SolverKind::Fpca)
    }

    pub fn needs_rank(self) -> bool {
        matches!(self, SolverKind::IhtR | SolverKind::IhtmsR | SolverKind::FpcaR)
    }

    pub fn label(self) -> &'static str {
        match self {
            SolverKind::Fpc => "FPC",
            SolverKind::IhtR => "IHTr",
            SolverKind::Iht => "IHT",
            SolverKind::IhtmsR => "IHTMSr",
            SolverKind::Ihtms => "IHTMS",
            SolverKind::FpcaR => "FPCAr",
            SolverKind::Fpca => "FPCA",
        }
    }

    /// CLI name: `fpc`, `iht`, `ihtms`, `fpcar`, `fpca`, with `-adaptive` for
    /// the adaptive-rank variants of IHT and IHTMS.
    pub fn cli_name(self) -> &'static str {
        match self {
            SolverKind::Fpc => "fpc",
            SolverKind::IhtR => "iht",
            SolverKind::Iht => "iht-adaptive",
            SolverKind::IhtmsR => "ihtms",
            SolverKind::Ihtms => "ihtms-adaptive",
            SolverKind::FpcaR => "fpcar",
            SolverKind::Fpca => "fpca",
        }
    }

    /// Rank mode this solver runs with, given the problem's true or guessed rank.
    pub fn rank_mode(self, given_rank: Option<usize>) -> Result<RankMode> {
        if self.is_adaptive() || self == SolverKind::Fpc {
            return Ok(RankMode::Adaptive(None));
        }
        given_rank.map(RankMode::Fixed).ok_or_else(|| invalid(format!("solver {} requires a rank", self.cli_name())))
    }

    pub fn solve(self, problem: &Problem, cfg: &SolverConfig) -> Result<SolveTrace> {
        match self {
            SolverKind::Fpc => fpc_solve(problem, cfg.mu.unwrap_or(cfg.mu_bar), cfg),
            SolverKind::IhtR | SolverKind::Iht => iht_solve(problem, cfg),
            SolverKind::IhtmsR | SolverKind::Ihtms => ihtms_solve(problem, cfg.mu.unwrap_or(cfg.mu_bar), cfg),
            SolverKind::FpcaR => fpcar_solve(problem, cfg),
            SolverKind::Fpca => fpca_solve(problem, cfg),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "fpc" => SolverKind::Fpc,
            "iht" | "ihtr" => SolverKind::IhtR,
            "iht-adaptive" => SolverKind::Iht,
            "ihtms" | "ihtmsr" => SolverKind::IhtmsR,
            "ihtms-adaptive" => SolverKind::Ihtms,
            "fpcar" => SolverKind::FpcaR,
            "fpca" | "fpca-adaptive" => SolverKind::Fpca,
            other => return Err(invalid(format!("unknown solver '{other}'"))),
        })
    }
}

/// Fixed-point iteration for `min mu ||X||_* + 1/2 ||A X - b||^2`:
/// `X <- S_{tau mu}(X - tau A*(A X - b))`, no rank truncation.
///
/// `tau` defaults to `1/lambda_max(A*A)`; values outside `(0, 2/lambda_max)`
/// are clamped to `1.99/lambda_max` with a warning.
pub fn fpc_solve(problem: &Problem, mu: f64, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(invalid(format!("mu must be nonnegative, got {mu}")));
    }
    let lam = spectral_upper_bound(problem.map)?;
    let mut warnings = Vec::new();
    let tau = if lam <= 0.0 {
        cfg.tau.unwrap_or(1.0)
    } else {
        match cfg.tau {
            None => 1.0 / lam,
            Some(t) if t < 2.0 / lam => t,
            Some(t) => {
                let clamped = 1.99 / lam;
                warnings.push(format!("tau {t} outside (0, 2/lambda_max = {}); clamped to {clamped}", 2.0 / lam));
                clamped
            }
        }
    };
    let plan = Plan { label: "FPC", tau, stages: vec![mu], rank: RankPlan::Full, shrink_first: false };
    let mut trace = run(problem, cfg, &plan)?;
    warnings.append(&mut trace.warnings);
    trace.warnings = warnings;
    Ok(trace)
}

/// Iterative hard thresholding: `X <- R_r(X - tau A*(A X - b))`.
pub fn iht_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    let rank = rank_plan(problem, cfg)?;
    let label = if matches!(rank, RankPlan::Fixed(_)) { "IHTr" } else { "IHT" };
    let plan = Plan { label, tau: step(problem, cfg, &rank), stages: vec![0.0], rank, shrink_first: false };
    run(problem, cfg, &plan)
}

/// Hard thresholding with a fixed shrinkage: `X <- R_r(S_mu(X - tau A*(A X - b)))`.
pub fn ihtms_solve(problem: &Problem, mu: f64, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(invalid(format!("mu must be nonnegative, got {mu}")));
    }
    let rank = rank_plan(problem, cfg)?;
    let label = if matches!(rank, RankPlan::Fixed(_)) { "IHTMSr" } else { "IHTMS" };
    let plan = Plan { label, tau: step(problem, cfg, &rank), stages: vec![mu], rank, shrink_first: true };
    run(problem, cfg, &plan)
}

/// Continuation over `mu` with a given rank: `X <- S_mu(R_r(Y))`, each stage
/// warm-started from the last, stopping once the final stage (`mu = mu_bar`)
/// meets the step tolerance.
pub fn fpcar_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    let rank = rank_plan(problem, cfg)?;
    if !matches!(rank, RankPlan::Fixed(_)) {
        return Err(invalid("fpcar requires a fixed rank"));
    }
    let plan = Plan {
        label: "FPCAr",
        tau: step(problem, cfg, &rank),
        stages: schedule(problem, cfg)?,
        rank,
        shrink_first: false,
    };
    run(problem, cfg, &plan)
}

/// Continuation with adaptively chosen rank: `X <- S_{tau mu}(R_r(Y))`.
pub fn fpca_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    let rank = rank_plan(problem, cfg)?;
    if !matches!(rank, RankPlan::Adaptive(_)) {
        return Err(invalid("fpca requires an adaptive rank mode"));
    }
    let plan = Plan {
        label: "FPCA",
        tau: step(problem, cfg, &rank),
        stages: schedule(problem, cfg)?,
        rank,
        shrink_first: false,
    };
    run(problem, cfg, &plan)
}

fn schedule(problem: &Problem, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let mu_1 = match cfg.mu_1 {
        Some(v) => v,
        None => {
            let atb = problem.map.adjoint(problem.b)?;
            let s1 = linalg::svd(&atb, Truncation::Top(1))?.sigma[0];
            (cfg.eta_mu * s1).max(cfg.mu_bar)
        }
    };
    mu_schedule(mu_1, cfg.eta_mu, cfg.mu_bar)
}

#[derive(Debug, Clone, Copy)]
enum RankPlan {
    Full,
    Fixed(usize),
    Adaptive(usize),
}

fn rank_plan(problem: &Problem, cfg: &SolverConfig) -> Result<RankPlan> {
    let (m, n) = problem.map.shape();
    let k = m.min(n);
    match cfg.rank_mode {
        RankMode::Fixed(r) if r >= 1 && r <= k => Ok(RankPlan::Fixed(r)),
        RankMode::Fixed(r) => Err(invalid(format!("rank {r} outside 1..={k}"))),
        RankMode::Adaptive(Some(r)) => Ok(RankPlan::Adaptive(r.clamp(1, k))),
        RankMode::Adaptive(None) => {
            let r_max = metrics(m, n, problem.map.measurements(), 1)?.r_max;
            Ok(RankPlan::Adaptive(r_max.clamp(1, k)))
        }
    }
}

/// Default gradient step for the thresholding solvers.
///
/// For a Gaussian map with `N(0, 1/p)` entries, `A*A` restricted to the sum of
/// two rank-`r` tangent spaces has spectrum close to `[(1 - sqrt(2 FR))^2, (1 + sqrt(2 FR))^2]`
/// with `FR = r(m+n-r)/p`. A unit step leaves that range unstable once
/// `FR` nears 1/4, so the step is `1 / (1 + 2 FR)`, taken at the fixed rank or
/// at the rank cap. Identity and mask maps have `A*A` a projection and use 1.
pub fn default_step(kind: MapKind, scale: f64, m: usize, n: usize, p: usize, r: usize) -> f64 {
    match kind {
        MapKind::Identity | MapKind::EntryMask => 1.0 / (scale * scale),
        MapKind::DenseGaussian | MapKind::Dense => {
            let r = r.min(m.min(n)) as f64;
            let fr = r * (m as f64 + n as f64 - r) / p as f64;
            1.0 / ((1.0 + 2.0 * fr) * scale * scale)
        }
    }
}

fn step(problem: &Problem, cfg: &SolverConfig, rank: &RankPlan) -> f64 {
    if let Some(t) = cfg.tau {
        return t;
    }
    let (m, n) = problem.map.shape();
    let r = match *rank {
        RankPlan::Fixed(r) | RankPlan::Adaptive(r) => r,
        RankPlan::Full => m.min(n),
    };
    let map = problem.map;
    default_step(map.kind(), map.scale(), m, n, map.measurements(), r)
}

struct Plan {
    label: &'static str,
    tau: f64,
    /// Shrinkage per continuation stage; a single entry means no continuation.
    stages: Vec<f64>,
    rank: RankPlan,
    /// Shrink before truncating (IHTMS). Same result, kept for fidelity.
    shrink_first: bool,
}

/// Rank selection state for the adaptive plans.
struct AdaptiveRank {
    r_max: usize,
    r: usize,
    grad_norms: Vec<f64>,
    violations: usize,
}

impl AdaptiveRank {
    fn next(
        &mut self,
        cfg: &SolverConfig,
        prev_sigma: Option<&[f64]>,
        grad_norm: f64,
        nonexpansive_violated: bool,
    ) -> usize {
        self.grad_norms.push(grad_norm);
        let Some(sigma) = prev_sigma else {
            return self.r;
        };
        let hist: &[f64] = match cfg.rank_increase {
            RankIncrease::GradientBlowup => {
                let k = self.grad_norms.len();
                &self.grad_norms[k.saturating_sub(2)..]
            }
            RankIncrease::NonExpansiveViolations => &[],
        };
        let mut r = rank_heuristic(sigma, cfg.eps_s, hist, self.r_max, cfg.grad_blowup_factor);
        if cfg.rank_increase == RankIncrease::NonExpansiveViolations && nonexpansive_violated {
            self.violations += 1;
            if self.violations >= cfg.violation_limit {
                self.violations = 0;
                r = (r + 1).min(self.r_max);
            }
        }
        self.r = r;
        r
    }
}

fn truncated(
    y: &DenseMatrix,
    r: usize,
    cfg: &SolverConfig,
    r_max: usize,
    iter: usize,
    warnings: &mut Vec<String>,
) -> Result<SvdFactors> {
    let k = y.nrows().min(y.ncols());
    let r = r.min(k);
    match cfg.svd_mode {
        SvdMode::Exact => linalg::hard_threshold_factors(y, r),
        SvdMode::MonteCarlo => {
            let n = y.ncols();
            let c_s = cfg.c_s.unwrap_or((2 * r_max).saturating_sub(2)).clamp(r, n);
            let params = SamplerParams::uniform(n, c_s, r, derive_seed(cfg.seed, &[iter as u64]));
            let approx = approx_svd::linear_time_svd(y, &params)?;
            if approx.is_degenerate() {
                if warnings.len() < 16 {
                    warnings.push(format!("iteration {iter}: degenerate column sample, used exact SVD"));
                }
                return linalg::hard_threshold_factors(y, r);
            }
            Ok(approx_svd::reconstruct_factors(&approx, y)?.truncate(r))
        }
    }
}

fn run(problem: &Problem, cfg: &SolverConfig, plan: &Plan) -> Result<SolveTrace> {
    problem.validate()?;
    let start = Instant::now();
    let map = problem.map;
    let (m, n) = map.shape();
    let k_full = m.min(n);
    let truth_norm = problem.truth.map(|t| t.norm());
    let r_max_for_cs = metrics(m, n, map.measurements(), 1).map(|mt| mt.r_max).unwrap_or(1).max(1);

    let mut x = problem.x0.cloned().unwrap_or_else(|| DenseMatrix::zeros(m, n));
    let mut resid = map.apply_unchecked(&x) - problem.b;
    let mut prev_y: Option<DenseMatrix> = None;
    let mut prev_sigma: Option<Vec<f64>> = None;
    let mut last_violation = false;
    let mut adaptive = match plan.rank {
        RankPlan::Adaptive(r_max) => Some(AdaptiveRank { r_max, r: r_max, grad_norms: Vec::new(), violations: 0 }),
        _ => None,
    };

    let mut records = Vec::new();
    let mut iterates = Vec::new();
    let mut warnings = Vec::new();
    let mut iter = 0usize;
    let mut converged = false;
    let last_stage = plan.stages.len() - 1;

    'stages: for (j, &mu) in plan.stages.iter().enumerate() {
        let is_last = j == last_stage;
        let mut inner = 0usize;
        loop {
            if iter >= cfg.max_total_iters {
                break 'stages;
            }
            if !is_last && inner >= cfg.max_inner_iters {
                break;
            }
            let grad = map.adjoint_unchecked(&resid);
            let y = &x - &grad * plan.tau;
            let nu = plan.tau * mu;

            let x_next = match plan.rank {
                RankPlan::Full => {
                    let f = linalg::svd(&y, Truncation::Full)?;
                    let f = if nu > 0.0 { f.shrink(nu) } else { f };
                    prev_sigma = Some(f.sigma.clone());
                    f.recompose()
                }
                RankPlan::Fixed(_) | RankPlan::Adaptive(_) => {
                    let r = match (plan.rank, adaptive.as_mut()) {
                        (RankPlan::Adaptive(_), Some(state)) => {
                            state.next(cfg, prev_sigma.as_deref(), grad.norm(), last_violation)
                        }
                        (RankPlan::Fixed(r), _) => r,
                        _ => unreachable!("adaptive state exists for adaptive plans"),
                    };
                    let f = if plan.shrink_first && nu > 0.0 {
                        let full = match cfg.svd_mode {
                            SvdMode::Exact => linalg::svd(&y, Truncation::Full)?,
                            SvdMode::MonteCarlo => truncated(&y, r, cfg, r_max_for_cs, iter, &mut warnings)?,
                        };
                        full.shrink(nu).truncate(r)
                    } else {
                        let f = truncated(&y, r, cfg, r_max_for_cs, iter, &mut warnings)?;
                        if nu > 0.0 {
                            f.shrink(nu)
                        } else {
                            f
                        }
                    };
                    prev_sigma = Some(f.sigma.clone());
                    f.recompose()
                }
            };
            let rank = match plan.rank {
                RankPlan::Full => k_full,
                RankPlan::Fixed(r) => r,
                RankPlan::Adaptive(_) => adaptive.as_ref().map(|a| a.r).unwrap_or(1),
            };

            let step = (&x_next - &x).norm() / x.norm().max(1.0);
            if !step.is_finite() {
                return Err(Error::Numerical(format!("{}: iterate diverged at iteration {iter}", plan.label)));
            }
            resid = map.apply_unchecked(&x_next) - problem.b;
            let abs_err = problem.truth.map(|t| (&x_next - t).norm());
            let rel_err = abs_err.zip(truth_norm).map(|(e, tn)| if tn > 0.0 { e / tn } else { e });
            records.push(IterRecord { iter: iter + 1, mu, rank, residual: resid.norm(), step, abs_err, rel_err });
            if cfg.record_iterates {
                iterates.push(x_next.clone());
            }
            last_violation = match &prev_y {
                Some(py) => (&x_next - &x).norm() > (&y - py).norm(),
                None => false,
            };
            prev_y = Some(y);
            x = x_next;
            iter += 1;
            inner += 1;
            if step < cfg.xtol {
                if is_last {
                    converged = true;
                    break 'stages;
                }
                break;
            }
        }
    }

    if !converged {
        warnings.push(format!("{}: stopped after {iter} iterations without meeting xtol = {}", plan.label, cfg.xtol));
    }
    Ok(SolveTrace {
        solver: plan.label.to_string(),
        records,
        x,
        iterations: iter,
        converged,
        elapsed: start.elapsed(),
        warnings,
        iterates,
    })
}
