//! Random recovery instances, recovery metrics and multi-instance campaigns.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{self, DenseMatrix};
use crate::rng::{self, derive_seed, seeded};
use crate::sensing::LinearMap;
use crate::solvers::{Problem, RankMode, SolverConfig, SolverKind};

/// An instance counts as recovered when its relative error is below this.
pub const RECOVERY_TOL: f64 = 1e-3;

/// Environment variable capping campaign parallelism.
pub const THREADS_ENV: &str = "LRR_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Sampling ratio `p / (mn)`.
    pub sr: f64,
    /// Degrees of freedom over measurements, `r (m + n - r) / p`.
    pub fr: f64,
    /// Largest rank with `r (m + n - r) < p` (0 if none).
    pub r_max: usize,
}

pub fn metrics(m: usize, n: usize, p: usize, r: usize) -> Result<Metrics> {
    if m == 0 || n == 0 || p == 0 || r == 0 {
        return Err(invalid("m, n, p and r must be positive"));
    }
    let dof = |k: usize| k * (m + n - k);
    let r_max = (1..=m.min(n)).take_while(|&k| dof(k) < p).last().unwrap_or(0);
    let r_dof = r as f64 * (m as f64 + n as f64 - r as f64);
    Ok(Metrics { sr: p as f64 / (m * n) as f64, fr: r_dof / p as f64, r_max })
}

/// `||X - M||_F / ||M||_F`.
pub fn rel_err(x: &DenseMatrix, m: &DenseMatrix) -> Result<f64> {
    if x.shape() != m.shape() {
        return Err(invalid("rel_err: shape mismatch"));
    }
    let mn = m.norm();
    if mn == 0.0 {
        return Err(invalid("rel_err: reference matrix is zero"));
    }
    Ok((x - m).norm() / mn)
}

pub fn is_recovered(rel_err: f64) -> bool {
    rel_err < RECOVERY_TOL
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub r_true: usize,
    pub map: LinearMap,
    pub b: DVector<f64>,
    pub truth: Option<DenseMatrix>,
    pub noise_norm: f64,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn problem(&self) -> Problem<'_> {
        let p = Problem::new(&self.map, &self.b);
        match &self.truth {
            Some(t) => p.with_truth(t),
            None => p,
        }
    }
}

fn check_instance_dims(m: usize, n: usize, p: usize, r: usize) -> Result<()> {
    if m == 0 || n == 0 || p == 0 || r == 0 {
        return Err(invalid("m, n, p and r must be positive"));
    }
    if r > m.min(n) {
        return Err(invalid(format!("rank {r} exceeds min(m, n) = {}", m.min(n))));
    }
    if p > m * n {
        return Err(invalid(format!("p = {p} exceeds mn = {}", m * n)));
    }
    Ok(())
}

fn add_noise(b: &mut DVector<f64>, noise_norm: f64, seed: u64) -> Result<()> {
    if !(noise_norm >= 0.0 && noise_norm.is_finite()) {
        return Err(invalid("noise norm must be finite and nonnegative"));
    }
    if noise_norm > 0.0 {
        let u = rng::gaussian_vector(&mut seeded(seed), b.len());
        *b += u.normalize() * noise_norm;
    }
    Ok(())
}

/// `M = M_L M_R^T` with standard normal factors, a Gaussian map with
/// `N(0, 1/p)` entries, and `b = A vec(M) + e` with `||e||_2 = noise_norm`.
///
/// Streams: factors from `derive_seed(seed, [0])`, the map from
/// `derive_seed(seed, [1])`, the noise direction from `derive_seed(seed, [2])`.
pub fn generate_instance(
    m: usize,
    n: usize,
    p: usize,
    r: usize,
    seed: u64,
    noise_norm: f64,
) -> Result<ProblemInstance> {
    check_instance_dims(m, n, p, r)?;
    let truth = rng::gaussian_low_rank(&mut seeded(derive_seed(seed, &[0])), m, n, r);
    let map = LinearMap::gaussian(m, n, p, derive_seed(seed, &[1]))?;
    let mut b = map.apply(&truth)?;
    add_noise(&mut b, noise_norm, derive_seed(seed, &[2]))?;
    Ok(ProblemInstance { m, n, p, r_true: r, map, b, truth: Some(truth), noise_norm, seed })
}

/// Approximately low-rank truth `M = U diag(sigma) V^T` with random
/// orthonormal `U`, `V` and `sigma_i = 1` for `i <= r`, `decay^(i - r)` beyond.
/// `decay = 0` gives an exactly rank-`r` matrix.
pub fn near_lowrank_instance(m: usize, n: usize, p: usize, r: usize, decay: f64, seed: u64) -> Result<ProblemInstance> {
    check_instance_dims(m, n, p, r)?;
    if !(0.0..1.0).contains(&decay) {
        return Err(invalid(format!("decay must lie in [0, 1), got {decay}")));
    }
    let k = m.min(n);
    let mut rng = seeded(derive_seed(seed, &[0]));
    let u = rng::orthonormal_columns(&mut rng, m, k);
    let v = rng::orthonormal_columns(&mut rng, n, k);
    let sigma = DVector::from_fn(k, |i, _| if i < r { 1.0 } else { decay.powi((i + 1 - r) as i32) });
    let truth = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
    let map = LinearMap::gaussian(m, n, p, derive_seed(seed, &[1]))?;
    let b = map.apply(&truth)?;
    Ok(ProblemInstance { m, n, p, r_true: r, map, b, truth: Some(truth), noise_norm: 0.0, seed })
}

/// Relative error of the best rank-`r` approximation, the accuracy floor for
/// rank-`r` recovery of `m`.
pub fn truncation_floor(m: &DenseMatrix, r: usize) -> Result<f64> {
    rel_err(&linalg::hard_threshold(m, r)?, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub r: usize,
}

impl Cell {
    pub fn new(m: usize, n: usize, p: usize, r: usize) -> Self {
        Cell { m, n, p, r }
    }
}

/// Built-in cell lists.
pub fn preset(name: &str) -> Option<Vec<Cell>> {
    match name {
        "desk" => Some((1..=3).map(|r| Cell::new(40, 40, 320, r)).collect()),
        "paper" => Some((1..=5).map(|r| Cell::new(60, 60, 720, r)).collect()),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct CampaignOptions {
    pub instances: usize,
    pub master_seed: u64,
    pub noise_norm: f64,
    /// Worker threads; `None` reads `LRR_THREADS`, falling back to rayon's default.
    pub threads: Option<usize>,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions { instances: 10, master_seed: 0, noise_norm: 0.0, threads: None }
    }
}

/// Outcome of one solve inside a campaign.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub seed: u64,
    pub rel_err: Option<f64>,
    pub recovered: bool,
    pub iterations: usize,
    pub time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub r: usize,
    /// Rank handed to fixed-rank solvers (equals `r` outside wrong-rank studies).
    pub given_rank: Option<usize>,
    pub sr: f64,
    pub fr: f64,
    pub ns: usize,
    pub instances: usize,
    /// Mean wall time of the recovered instances.
    pub avg_time_s: Option<f64>,
    /// Mean relative error of the recovered instances.
    pub avg_rel_err: Option<f64>,
    pub outcomes: Vec<InstanceOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub solver: SolverKind,
    pub config: SolverConfig,
    pub master_seed: u64,
    pub rows: Vec<CellReport>,
    pub warnings: Vec<String>,
}

/// Per-instance seed: `derive_seed(master, [m, n, p, r, index])`.
pub fn instance_seed(master: u64, cell: &Cell, index: usize) -> u64 {
    derive_seed(master, &[cell.m as u64, cell.n as u64, cell.p as u64, cell.r as u64, index as u64])
}

pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&k| k > 0)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads.or_else(thread_cap_from_env) {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

fn solve_one(
    cell: &Cell,
    given_rank: Option<usize>,
    index: usize,
    solver: SolverKind,
    cfg: &SolverConfig,
    opts: &CampaignOptions,
) -> InstanceOutcome {
    let seed = instance_seed(opts.master_seed, cell, index);
    let fail = |msg: String| InstanceOutcome {
        index,
        seed,
        rel_err: None,
        recovered: false,
        iterations: 0,
        time_s: 0.0,
        error: Some(msg),
    };
    let inst = match generate_instance(cell.m, cell.n, cell.p, cell.r, seed, opts.noise_norm) {
        Ok(i) => i,
        Err(e) => return fail(e.to_string()),
    };
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(seed, &[3, cfg.seed]);
    cfg.rank_mode = match (solver.is_adaptive(), cfg.rank_mode) {
        // keep a configured rank cap
        (true, RankMode::Adaptive(cap)) => RankMode::Adaptive(cap),
        _ => match solver.rank_mode(given_rank) {
            Ok(mode) => mode,
            Err(e) => return fail(e.to_string()),
        },
    };
    let t0 = Instant::now();
    match solver.solve(&inst.problem(), &cfg) {
        Ok(trace) => {
            let time_s = t0.elapsed().as_secs_f64();
            let err = inst.truth.as_ref().and_then(|t| rel_err(&trace.x, t).ok());
            InstanceOutcome {
                index,
                seed,
                rel_err: err,
                recovered: err.is_some_and(is_recovered),
                iterations: trace.iterations,
                time_s,
                error: None,
            }
        }
        Err(e) => fail(e.to_string()),
    }
}

fn run_cell(
    cell: &Cell,
    given_rank: Option<usize>,
    solver: SolverKind,
    cfg: &SolverConfig,
    opts: &CampaignOptions,
) -> CellReport {
    let mut outcomes: Vec<InstanceOutcome> =
        (0..opts.instances).into_par_iter().map(|i| solve_one(cell, given_rank, i, solver, cfg, opts)).collect();
    outcomes.sort_by_key(|o| o.index);
    let ok: Vec<&InstanceOutcome> = outcomes.iter().filter(|o| o.recovered).collect();
    let ns = ok.len();
    let mean = |f: &dyn Fn(&InstanceOutcome) -> f64| (ns > 0).then(|| ok.iter().map(|o| f(o)).sum::<f64>() / ns as f64);
    let mt = metrics(cell.m, cell.n, cell.p, cell.r).unwrap_or(Metrics { sr: f64::NAN, fr: f64::NAN, r_max: 0 });
    CellReport {
        m: cell.m,
        n: cell.n,
        p: cell.p,
        r: cell.r,
        given_rank,
        sr: mt.sr,
        fr: mt.fr,
        ns,
        instances: opts.instances,
        avg_time_s: mean(&|o| o.time_s),
        avg_rel_err: mean(&|o| o.rel_err.unwrap_or(f64::NAN)),
        outcomes,
    }
}

fn fr_warnings(cells: &[Cell]) -> Vec<String> {
    cells
        .iter()
        .filter_map(|c| {
            let mt = metrics(c.m, c.n, c.p, c.r).ok()?;
            (mt.fr > 1.0).then(|| {
                format!(
                    "cell ({}, {}, {}, {}): FR = {:.2} > 1, recovery impossible (more rank-{} matrices fit b than one)",
                    c.m, c.n, c.p, c.r, mt.fr, c.r
                )
            })
        })
        .collect()
}

/// Solves `instances` random problems per cell. Fixed-rank solvers are given
/// the cell's true rank. Individual failures count as not recovered.
pub fn run_campaign(
    cells: &[Cell],
    solver: SolverKind,
    cfg: &SolverConfig,
    opts: &CampaignOptions,
) -> Result<BenchReport> {
    if cells.is_empty() {
        return Err(invalid("campaign needs at least one cell"));
    }
    if opts.instances == 0 {
        return Err(invalid("campaign needs at least one instance per cell"));
    }
    cfg.validate()?;
    let warnings = fr_warnings(cells);
    let rows = with_pool(opts.threads, || {
        cells.iter().map(|c| run_cell(c, solver.needs_rank().then_some(c.r), solver, cfg, opts)).collect()
    });
    Ok(BenchReport { solver, config: cfg.clone(), master_seed: opts.master_seed, rows, warnings })
}

/// Fixed-rank solvers run once per guessed rank on the same instances of
/// `cell`; adaptive solvers run once.
pub fn wrong_rank_study(
    cell: &Cell,
    given: &[usize],
    solvers: &[SolverKind],
    cfg: &SolverConfig,
    opts: &CampaignOptions,
) -> Result<Vec<BenchReport>> {
    if given.is_empty() || solvers.is_empty() {
        return Err(invalid("wrong-rank study needs ranks and solvers"));
    }
    cfg.validate()?;
    let k = cell.m.min(cell.n);
    if let Some(&bad) = given.iter().find(|&&g| g == 0 || g > k) {
        return Err(invalid(format!("given rank {bad} outside 1..={k}")));
    }
    with_pool(opts.threads, || {
        Ok(solvers
            .iter()
            .map(|&solver| {
                let rows = if solver.needs_rank() {
                    given.iter().map(|&g| run_cell(cell, Some(g), solver, cfg, opts)).collect()
                } else {
                    vec![run_cell(cell, None, solver, cfg, opts)]
                };
                BenchReport { solver, config: cfg.clone(), master_seed: opts.master_seed, rows, warnings: Vec::new() }
            })
            .collect())
    })
}

fn opt_sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2e}")).unwrap_or_else(|| "---".into())
}

fn opt_time(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "---".into())
}

pub const CSV_HEADER: &str = "solver,m,n,p,r,SR,FR,NS,avg_time_s,avg_rel_err";

impl BenchReport {
    /// Rows under [`CSV_HEADER`]. Without timing the `avg_time_s` column is
    /// dropped, leaving output that depends only on the seeds.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::new();
        out.push_str(&csv_header(include_timing));
        out.push('\n');
        self.append_csv_rows(&mut out, include_timing);
        out
    }

    pub fn append_csv_rows(&self, out: &mut String, include_timing: bool) {
        for row in &self.rows {
            let r = row.given_rank.unwrap_or(row.r);
            let _ = write!(
                out,
                "{},{},{},{},{},{:.2},{:.2},{}",
                self.solver.label(),
                row.m,
                row.n,
                row.p,
                r,
                row.sr,
                row.fr,
                row.ns
            );
            if include_timing {
                let _ = write!(out, ",{}", opt_time(row.avg_time_s));
            }
            let _ = writeln!(out, ",{}", opt_sci(row.avg_rel_err));
        }
    }

    /// Text table in the layout of the published recovery tables.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.solver.label());
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>6} {:>3} {:>5} {:>5} | {:>3} {:>8} {:>9}",
            "m", "n", "p", "r", "SR", "FR", "NS", "time", "rel.err."
        );
        for row in &self.rows {
            let r = row.given_rank.unwrap_or(row.r);
            let _ = writeln!(
                out,
                "{:>4} {:>4} {:>6} {:>3} {:>5.2} {:>5.2} | {:>3} {:>8} {:>9}",
                row.m,
                row.n,
                row.p,
                r,
                row.sr,
                row.fr,
                row.ns,
                opt_time(row.avg_time_s),
                opt_sci(row.avg_rel_err)
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

pub fn csv_header(include_timing: bool) -> String {
    if include_timing {
        CSV_HEADER.to_string()
    } else {
        CSV_HEADER.replace(",avg_time_s", "")
    }
}

/// Concatenated CSV for several reports under one header.
pub fn reports_csv(reports: &[BenchReport], include_timing: bool) -> String {
    let mut out = csv_header(include_timing);
    out.push('\n');
    for r in reports {
        r.append_csv_rows(&mut out, include_timing);
    }
    out
}
