//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::conformal::{calibrate, empirical_quantile, ScoreSet};
use crate::convergence::{error_bound_steady, synthetic_fixed_point_run, AffineMap, EtaInjector};
use crate::episodic::{run, KappaMode, RunReport, SeedRoots, SolverKind, Termination};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::outputs::{termination_label, write_outputs};
use crate::planner::{Planner, PlannerContext};
use crate::sensitivity::{beta_t_analytic, beta_t_empirical, kappa, l_u_empirical, LipschitzInputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tubeplan", version, about = "Iterative safe planning with conformal tubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full episodic experiment from a configuration file.
    Run(RunArgs),
    /// Episodic experiment with the car-pedestrian preset.
    Casestudy(RunArgs),
    /// Radius recursion on an affine map with injected perturbations.
    Synthetic(SyntheticArgs),
    /// One-shot conformal quantile of a score file.
    Calibrate(CalibrateArgs),
    /// Coupling and planner sensitivity probes at one radius.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// explicit | implicit
    #[arg(long)]
    solver: Option<String>,
    /// fixed:<v> | estimated
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for every seed stream.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dump_scores: bool,
    /// Continue past infeasible or unsafe updates; such episodes are marked
    /// `feasible = false`.
    #[arg(long)]
    best_effort: bool,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    /// Comma-separated gains.
    #[arg(long, default_value = "0.1,0.2,0.3", value_delimiter = ',')]
    kappa: Vec<f64>,
    /// Perturbation bound `C` for uniform injection.
    #[arg(long, default_value_t = 0.05)]
    c: f64,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 1.0)]
    r_star: f64,
    #[arg(long, default_value_t = 2.0)]
    r0: f64,
    /// zero | uniform | calibrated
    #[arg(long, default_value = "uniform")]
    eta: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/synthetic")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// CSV with a `score` column.
    #[arg(long)]
    scores: PathBuf,
    /// Conformal level `1 - alpha_bar`, used as given.
    #[arg(long, conflicts_with_all = ["alpha", "delta"])]
    level: Option<f64>,
    /// Miscoverage; the level is inflated with `delta`.
    #[arg(long, requires = "delta")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    delta: Option<f64>,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidGain(_) => EXIT_CONFIG,
        e if e.is_runtime_abort() => EXIT_ABORT,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run(args) => {
            let path = args
                .config
                .clone()
                .ok_or_else(|| Error::Config("run requires --config PATH".into()))?;
            let cfg = ExperimentConfig::load(&path)?;
            run_experiment(cfg, &args)
        }
        Command::Casestudy(args) => {
            let cfg = match &args.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::casestudy(),
            };
            run_experiment(cfg, &args)
        }
        Command::Synthetic(args) => synthetic(&args),
        Command::Calibrate(args) => calibrate_cmd(&args),
        Command::Sensitivity(args) => sensitivity_cmd(&args),
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<()> {
    if let Some(s) = &args.solver {
        cfg.run.solver = s.parse::<SolverKind>()?;
    }
    if let Some(k) = &args.kappa {
        cfg.run.kappa = KappaMode::parse_with(k, cfg.run.kappa)?;
    }
    if let Some(n) = args.episodes {
        cfg.run.max_episodes = n;
    }
    if let Some(dir) = &args.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        cfg.run.seeds = SeedRoots::uniform(seed);
    }
    if args.dump_scores {
        cfg.output.dump_scores = true;
    }
    if args.best_effort {
        cfg.run.best_effort = true;
    }
    cfg.validate()
}

fn shifted(seeds: SeedRoots, k: u64) -> SeedRoots {
    SeedRoots {
        calibration: seeds.calibration.wrapping_add(k),
        evaluation: seeds.evaluation.wrapping_add(k),
        sensitivity: seeds.sensitivity.wrapping_add(k),
        prerun: seeds.prerun.wrapping_add(k),
    }
}

fn run_experiment(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<i32> {
    apply_overrides(&mut cfg, args)?;
    let reps = cfg.output.repetitions;
    let mut code = EXIT_OK;
    for k in 0..reps {
        let mut rep_cfg = cfg.clone();
        rep_cfg.run.seeds = shifted(cfg.run.seeds, k as u64);
        let dir = if reps == 1 {
            cfg.output.dir.clone()
        } else {
            cfg.output.dir.join(format!("rep_{k}"))
        };
        let report = run(&rep_cfg.run)?;
        write_outputs(&report, &rep_cfg, &dir, rep_cfg.output.dump_scores)?;
        print_summary(&report, &dir);
        if let Termination::Aborted(why) = &report.termination {
            eprintln!("error: run aborted at episode {}: {why}", report.records.len() - 1);
            code = EXIT_ABORT;
        }
    }
    Ok(code)
}

fn print_summary(report: &RunReport, dir: &Path) {
    let last = report.records.last().expect("nonempty report");
    println!(
        "episodes={} termination={} r0={} r_final={} cost_final={} out={}",
        report.records.len(),
        termination_label(&report.termination),
        report.r0,
        last.r_next,
        last.cost,
        dir.display()
    );
}

fn synthetic(args: &SyntheticArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for &k in &args.kappa {
        let injector = match args.eta.as_str() {
            "zero" => EtaInjector::Zero,
            "uniform" => EtaInjector::UniformBounded { c: args.c, seed: args.seed },
            "calibrated" => EtaInjector::Calibrated {
                n: 1000,
                alpha: 0.1,
                delta: 0.05,
                delta_j: 0.05 / args.episodes.max(1) as f64,
                seed: args.seed,
            },
            other => return Err(Error::Config(format!("unknown eta mode '{other}'"))),
        };
        let trace = synthetic_fixed_point_run(AffineMap { kappa: k, r_star: args.r_star }, args.r0, injector, args.episodes)?;
        let path = args.out.join(format!("trace_kappa_{k}.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        trace.write_csv(f).map_err(|e| Error::csv(&path, e))?;
        let limsup = error_bound_steady(0.0, trace.c, k, 0)?.limsup;
        println!(
            "kappa={k} terminal_error={:.6e} limsup_bound={} bound_violations={} trace={}",
            trace.terminal_error(),
            limsup.map_or("unavailable".to_string(), |v| format!("{v:.6e}")),
            trace.bound_violations(),
            path.display()
        );
    }
    Ok(EXIT_OK)
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<i32> {
    let scores = ScoreSet::read_csv_file(&args.scores, 0)?;
    let res = match (args.level, args.alpha, args.delta) {
        (Some(level), _, _) => empirical_quantile(&scores, level)?,
        (None, Some(a), Some(d)) => calibrate(&scores, a, d)?,
        _ => return Err(Error::Config("calibrate needs --level or both --alpha and --delta".into())),
    };
    println!("q={}", res.q);
    println!("k={} n={} alpha_bar={}", res.k_index, res.n, res.alpha_bar);
    Ok(EXIT_OK)
}

fn sensitivity_cmd(args: &SensitivityArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::casestudy(),
    };
    if let Some(s) = args.seed {
        cfg.run.seeds = SeedRoots::uniform(s);
    }
    let run_cfg = &cfg.run;
    let (l_yy, l_yx, l_yu) = run_cfg.pedestrian.lipschitz_constants();
    let lip = LipschitzInputs {
        l_xx: 1.0,
        l_xu: run_cfg.planner.dt,
        l_yy,
        l_yx,
        l_yu,
    };
    let (a_t, beta_analytic) = beta_t_analytic(&lip, run_cfg.planner.horizon)?;
    let planner = Planner::new(run_cfg.planner.clone())?;
    let y_hat = run_cfg.prediction();
    let plan = planner.solve(args.radius, &y_hat, &run_cfg.x0, None)?;
    if !plan.feasible {
        return Err(Error::Infeasible {
            radius: args.radius,
            reason: "plan at the probe radius".into(),
        });
    }
    let scene = run_cfg.scene()?;
    let beta_hat = beta_t_empirical(&scene, &plan.policy, &run_cfg.sensitivity.probe, run_cfg.seeds.sensitivity, 0)?;
    let ctx = PlannerContext {
        planner: &planner,
        y_hat: &y_hat,
        x0: &run_cfg.x0,
    };
    let l_u = l_u_empirical(&ctx, args.radius, run_cfg.sensitivity.l_u_step, &plan.policy)?;
    let gain = kappa(beta_hat, l_u)?;
    let cap = match run_cfg.kappa {
        KappaMode::Estimated { cap } => cap,
        KappaMode::Fixed { value } => value,
    };
    println!("radius={}", args.radius);
    println!("a_t={a_t} beta_t_analytic={beta_analytic}");
    println!("beta_t_empirical={beta_hat} l_u={l_u}");
    println!(
        "kappa_raw={} kappa_clamped={} update_valid={} contraction={}",
        gain.value,
        gain.value.min(cap),
        gain.update_valid,
        gain.contraction
    );
    Ok(EXIT_OK)
}
