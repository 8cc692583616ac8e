use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lrr_core::approx_svd::{linear_time_svd, reconstruct, SamplerParams};
use lrr_core::bench::{self, BenchReport, CampaignOptions, Cell, ProblemInstance};
use lrr_core::linalg::{self, DenseMatrix};
use lrr_core::sensing::{check_isometry_margins, estimate_rip, LinearMap, MapHeader};
use lrr_core::solvers::{RankIncrease, RankMode, SvdMode};
use lrr_core::{io, rng, Error, Problem, SolverConfig, SolverKind};
use serde_json::json;

const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "lrr", version, about = "Low-rank matrix recovery from linear measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem, from files or from a generated instance.
    Solve(SolveArgs),
    /// Run a recovery campaign over a list of cells.
    Bench(BenchArgs),
    /// Estimate the restricted isometry constant of an operator.
    Rip(RipArgs),
    /// Run the column-sampling approximate SVD on a matrix.
    Svd(SvdArgs),
    /// Solve true-rank instances with fixed solvers handed other ranks.
    WrongRank(WrongRankArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SvdModeArg {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankIncreaseArg {
    GradientBlowup,
    NonExpansiveViolations,
}

/// Solver parameters. Flags override the JSON config file, which overrides
/// the built-in defaults.
#[derive(Args, Default)]
struct SolverFlags {
    /// JSON file with solver parameters (any subset of the fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Fixed shrinkage for fpc and ihtms.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    mu_bar: Option<f64>,
    #[arg(long)]
    eta_mu: Option<f64>,
    #[arg(long = "mu-1")]
    mu_1: Option<f64>,
    #[arg(long)]
    xtol: Option<f64>,
    #[arg(long)]
    eps_s: Option<f64>,
    /// Sampled columns for the Monte Carlo SVD.
    #[arg(long)]
    c_s: Option<usize>,
    #[arg(long)]
    max_inner_iters: Option<usize>,
    #[arg(long)]
    max_total_iters: Option<usize>,
    /// Rank cap for the adaptive solvers.
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long, value_enum)]
    svd_mode: Option<SvdModeArg>,
    #[arg(long, value_enum)]
    rank_increase: Option<RankIncreaseArg>,
    #[arg(long)]
    grad_blowup_factor: Option<f64>,
    #[arg(long)]
    violation_limit: Option<usize>,
}

impl SolverFlags {
    fn build(&self) -> anyhow::Result<SolverConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<SolverConfig>(&text).map_err(Error::from)?
            }
            None => SolverConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        macro_rules! set_opt {
            ($($field:ident),*) => { $( if self.$field.is_some() { cfg.$field = self.$field; } )* };
        }
        set!(mu_bar, eta_mu, xtol, eps_s, max_inner_iters, max_total_iters, grad_blowup_factor, violation_limit);
        set_opt!(tau, mu, mu_1, c_s);
        if let Some(m) = self.svd_mode {
            cfg.svd_mode = match m {
                SvdModeArg::Exact => SvdMode::Exact,
                SvdModeArg::MonteCarlo => SvdMode::MonteCarlo,
            };
        }
        if let Some(r) = self.rank_increase {
            cfg.rank_increase = match r {
                RankIncreaseArg::GradientBlowup => RankIncrease::GradientBlowup,
                RankIncreaseArg::NonExpansiveViolations => RankIncrease::NonExpansiveViolations,
            };
        }
        Ok(cfg)
    }

    /// Sets the rank mode for `solver`, taking the fixed rank from `rank`.
    fn for_solver(&self, solver: SolverKind, rank: Option<usize>) -> anyhow::Result<SolverConfig> {
        let mut cfg = self.build()?;
        cfg.rank_mode = solver.rank_mode(rank)?;
        if let (RankMode::Adaptive(_), Some(r)) = (cfg.rank_mode, self.r_max) {
            cfg.rank_mode = RankMode::Adaptive(Some(r));
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SolveArgs {
    /// fpc, ihtr, iht-adaptive, ihtmsr, ihtms-adaptive, fpcar or fpca.
    #[arg(long)]
    solver: String,
    /// Rank for the fixed-rank solvers.
    #[arg(long)]
    rank: Option<usize>,
    /// Operator header (JSON); use with --b.
    #[arg(long, requires = "b")]
    operator: Option<PathBuf>,
    /// Measurement vector file.
    #[arg(long, requires = "operator")]
    b: Option<PathBuf>,
    /// Ground truth matrix file, for error reporting.
    #[arg(long, requires = "operator")]
    truth: Option<PathBuf>,
    /// Starting point; zero when omitted.
    #[arg(long)]
    x0: Option<PathBuf>,
    #[arg(long, conflicts_with = "operator")]
    m: Option<usize>,
    #[arg(long, conflicts_with = "operator")]
    n: Option<usize>,
    #[arg(long, conflicts_with = "operator")]
    p: Option<usize>,
    #[arg(long, conflicts_with = "operator")]
    true_rank: Option<usize>,
    /// Norm of the additive measurement noise for generated instances.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for X.mat, trace.csv, decay.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// Built-in cell list: desk or paper.
    #[arg(long, conflicts_with = "cells")]
    preset: Option<String>,
    /// JSON array of {m, n, p, r} cells.
    #[arg(long)]
    cells: Option<PathBuf>,
    /// Solver name, or "all" for the six thresholding modes.
    #[arg(long, default_value = "all")]
    solver: String,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Worker threads; defaults to LRR_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Leave the timing column out of the CSV.
    #[arg(long)]
    no_timing: bool,
    /// Directory for report.csv, report.txt and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
}

#[derive(Args)]
struct RipArgs {
    #[arg(long, group = "kind")]
    gaussian: bool,
    #[arg(long, group = "kind")]
    identity: bool,
    #[arg(long, group = "kind")]
    mask: bool,
    /// Operator header (JSON).
    #[arg(long, group = "kind")]
    operator: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Trials for the projected-isometry checks; 0 skips them.
    #[arg(long, default_value_t = 50)]
    prop_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SvdArgs {
    /// Matrix file; a Gaussian --m x --n matrix is drawn when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, conflicts_with = "input")]
    m: Option<usize>,
    #[arg(long, conflicts_with = "input")]
    n: Option<usize>,
    /// Sampled columns.
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    target_rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WrongRankArgs {
    #[arg(long, default_value_t = 40)]
    m: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 320)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    true_rank: usize,
    /// Ranks handed to the fixed-rank solvers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    given: Vec<usize>,
    /// Solvers; adaptive ones run once.
    #[arg(long, value_delimiter = ',', default_value = "ihtr,iht-adaptive,ihtmsr,ihtms-adaptive,fpcar,fpca")]
    solvers: Vec<String>,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
}

fn parse_solver(name: &str) -> anyhow::Result<SolverKind> {
    Ok(name.parse::<SolverKind>()?)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => write(path, &(text + "\n")),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_solve(args: &SolveArgs) -> anyhow::Result<u8> {
    let solver = parse_solver(&args.solver)?;
    if solver.needs_rank() && args.rank.is_none() {
        bail!(Error::InvalidArgument(format!("solver {} requires --rank", solver.cli_name())));
    }
    let mut cfg = args.flags.for_solver(solver, args.rank)?;
    cfg.seed = args.seed;

    let (map, b, truth) = match (&args.operator, &args.b) {
        (Some(op), Some(b)) => {
            let text = fs::read_to_string(op).with_context(|| format!("reading {}", op.display()))?;
            let header: MapHeader = serde_json::from_str(&text).map_err(Error::from)?;
            let map = LinearMap::from_header(&header)?;
            let b = io::read_vector(b)?;
            let truth = args.truth.as_ref().map(io::read_matrix).transpose()?;
            (map, b, truth)
        }
        _ => {
            let (Some(m), Some(n), Some(p), Some(r)) = (args.m, args.n, args.p, args.true_rank) else {
                bail!(Error::InvalidArgument("give --operator and --b, or --m --n --p --true-rank".into()));
            };
            let ProblemInstance { map, b, truth, .. } = bench::generate_instance(m, n, p, r, args.seed, args.noise)?;
            (map, b, truth)
        }
    };
    let x0 = args.x0.as_ref().map(io::read_matrix).transpose()?;
    let mut problem = Problem::new(&map, &b);
    if let Some(t) = truth.as_ref() {
        problem = problem.with_truth(t);
    }
    if let Some(x) = x0.as_ref() {
        problem = problem.with_start(x);
    }
    let trace = solver.solve(&problem, &cfg)?;

    let (m, n) = map.shape();
    let last = trace.records.last();
    let summary = json!({
        "solver": trace.solver,
        "m": m,
        "n": n,
        "p": map.measurements(),
        "rel_err": trace.final_rel_err(),
        "iterations": trace.iterations,
        "converged": trace.converged,
        "xtol": cfg.xtol,
        "final_rank": last.map(|r| r.rank),
        "residual": last.map(|r| r.residual),
        "elapsed_s": trace.elapsed.as_secs_f64(),
        "seed": args.seed,
        "config": cfg,
        "warnings": trace.warnings,
    });
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        io::write_matrix(dir.join("X.mat"), &trace.x)?;
        write(&dir.join("trace.csv"), &trace.to_csv())?;
        if truth.is_some() {
            write(&dir.join("decay.csv"), &trace.decay_csv())?;
        }
        emit_json(&summary, Some(&dir.join("summary.json")))?;
    }
    emit_json(&summary, None)?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if trace.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn solver_list(name: &str) -> anyhow::Result<Vec<SolverKind>> {
    if name == "all" {
        Ok(SolverKind::TABLE.to_vec())
    } else {
        name.split(',').map(parse_solver).collect()
    }
}

fn write_reports(reports: &[BenchReport], out: Option<&Path>, timing: bool) -> anyhow::Result<()> {
    let table: String = reports.iter().map(|r| r.to_table() + "\n").collect();
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("report.csv"), &bench::reports_csv(reports, timing))?;
        write(&dir.join("report.txt"), &table)?;
        write(&dir.join("report.json"), &(serde_json::to_string_pretty(reports)? + "\n"))?;
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<u8> {
    let cells: Vec<Cell> = match (&args.preset, &args.cells) {
        (Some(name), _) => bench::preset(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset '{name}' (desk, paper)")))?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        (None, None) => bail!(Error::InvalidArgument("give --preset or --cells".into())),
    };
    let opts = CampaignOptions {
        instances: args.instances,
        master_seed: args.seed,
        noise_norm: args.noise,
        threads: args.threads,
    };
    let mut reports = Vec::new();
    for solver in solver_list(&args.solver)? {
        let cfg = args.flags.for_solver(solver, Some(1))?;
        let rep = bench::run_campaign(&cells, solver, &cfg, &opts)?;
        for w in &rep.warnings {
            eprintln!("warning: {w}");
        }
        reports.push(rep);
    }
    write_reports(&reports, args.out.as_deref(), !args.no_timing)?;
    Ok(0)
}

fn cmd_wrong_rank(args: &WrongRankArgs) -> anyhow::Result<u8> {
    let cell = Cell::new(args.m, args.n, args.p, args.true_rank);
    let opts =
        CampaignOptions { instances: args.instances, master_seed: args.seed, noise_norm: 0.0, threads: args.threads };
    let mut reports = Vec::new();
    for name in &args.solvers {
        let solver = parse_solver(name)?;
        let cfg = args.flags.for_solver(solver, Some(args.true_rank))?;
        reports.extend(bench::wrong_rank_study(&cell, &args.given, &[solver], &cfg, &opts)?);
    }
    write_reports(&reports, args.out.as_deref(), !args.no_timing)?;
    Ok(0)
}

fn cmd_rip(args: &RipArgs) -> anyhow::Result<u8> {
    let dims = || -> anyhow::Result<(usize, usize)> {
        match (args.m, args.n) {
            (Some(m), Some(n)) => Ok((m, n)),
            _ => bail!(Error::InvalidArgument("--m and --n are required".into())),
        }
    };
    let need_p = || args.p.ok_or_else(|| Error::InvalidArgument("--p is required".into()));
    let map = if let Some(path) = &args.operator {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        LinearMap::from_header(&serde_json::from_str(&text).map_err(Error::from)?)?
    } else if args.identity {
        let (m, n) = dims()?;
        LinearMap::identity(m, n)?
    } else if args.mask {
        let (m, n) = dims()?;
        LinearMap::entry_mask(m, n, need_p()?, args.seed)?
    } else {
        let (m, n) = dims()?;
        LinearMap::gaussian(m, n, need_p()?, args.seed)?
    };
    let est = estimate_rip(&map, args.r, args.trials, args.seed)?;
    let (m, n) = map.shape();
    let mut report = json!({
        "kind": map.kind(),
        "m": m,
        "n": n,
        "p": map.measurements(),
        "r": args.r,
        "trials": args.trials,
        "seed": args.seed,
        "delta_lower": est.delta_lower,
        "delta_upper": est.delta_upper,
    });
    if args.prop_trials > 0 {
        let props = check_isometry_margins(&map, args.r, args.prop_trials, args.seed)?;
        let margins: serde_json::Map<String, serde_json::Value> =
            props.margins().iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        report["margins"] = json!(margins);
        report["violations"] = json!(props.violations());
    }
    emit_json(&report, args.out.as_deref())?;
    Ok(0)
}

fn cmd_svd(args: &SvdArgs) -> anyhow::Result<u8> {
    let a: DenseMatrix = match (&args.input, args.m, args.n) {
        (Some(path), _, _) => io::read_matrix(path)?,
        (None, Some(m), Some(n)) => rng::gaussian_matrix(&mut rng::seeded(args.seed), m, n),
        _ => bail!(Error::InvalidArgument("give --input or --m and --n".into())),
    };
    let params = SamplerParams::uniform(a.ncols(), args.cols, args.target_rank, args.seed);
    let approx = linear_time_svd(&a, &params)?;
    let exact = linalg::singular_values(&a)?;
    let k = args.target_rank.min(exact.len());
    let best = (&a - linalg::hard_threshold(&a, k)?).norm();
    let error = if approx.is_degenerate() { a.norm() } else { (&a - reconstruct(&approx, &a)?).norm() };
    let slack = 0.5 * a.norm_squared();
    let report = json!({
        "m": a.nrows(),
        "n": a.ncols(),
        "cols": args.cols,
        "target_rank": args.target_rank,
        "k_eff": approx.k_eff(),
        "seed": args.seed,
        "sampled": approx.sampled,
        "sigma_c": approx.sigma,
        "sigma_exact": &exact[..k],
        "error": error,
        "exact_error": best,
        "error_vs_exact": error - best,
        "within_bound": error * error <= best * best + slack,
    });
    emit_json(&report, args.out.as_deref())?;
    Ok(0)
}

/// Usage and input errors map to exit code 2, everything else to 1.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Parse { .. } | Error::Json(_)) => {
            EXIT_USAGE
        }
        Some(_) => 1,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Rip(a) => cmd_rip(a),
        Command::Svd(a) => cmd_svd(a),
        Command::WrongRank(a) => cmd_wrong_rank(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
