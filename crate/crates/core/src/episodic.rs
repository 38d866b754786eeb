//! The episodic loop: deploy the current policy, calibrate a tube from fresh
//! rollouts, transfer the radius across the upcoming policy change, re-plan,
//! and stop once radius and policy settle.

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, score, ScoreSet};
use crate::dynamics::{predict_nominal, PedestrianModel, Policy, Scene, SingleIntegrator, State, Trajectory};
use crate::error::{Error, Result};
use crate::planner::{safety_eval, PlanResult, Planner, PlannerConfig, PlannerContext};
use crate::radius_update::{explicit_update_projected, implicit_update, Branch, RadiusInterval, UpdateOutcome};
use crate::seeds::{SeedKey, Stream};
use crate::sensitivity::{beta_t_empirical, kappa, l_u_empirical, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Explicit,
    Implicit,
}

impl FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Self::Explicit),
            "implicit" => Ok(Self::Implicit),
            other => Err(Error::Config(format!("unknown solver '{other}', expected explicit or implicit"))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Explicit => "explicit",
            Self::Implicit => "implicit",
        })
    }
}

/// Where the gain used by the radius update comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KappaMode {
    Fixed { value: f64 },
    /// Finite-difference estimate `beta_T * L_U`, clamped to `cap`.
    Estimated { cap: f64 },
}

impl KappaMode {
    pub const DEFAULT_CAP: f64 = 0.9;

    /// Parses `fixed:<v>` or `estimated` (keeping `cap` from `current` when
    /// it already is an estimated mode).
    pub fn parse_with(s: &str, current: KappaMode) -> Result<Self> {
        if s == "estimated" {
            let cap = match current {
                KappaMode::Estimated { cap } => cap,
                KappaMode::Fixed { .. } => Self::DEFAULT_CAP,
            };
            return Ok(KappaMode::Estimated { cap });
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let value: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse kappa value '{v}'")))?;
            return Ok(KappaMode::Fixed { value });
        }
        Err(Error::Config(format!("unknown kappa mode '{s}', expected fixed:<v> or estimated")))
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            KappaMode::Fixed { value } => value,
            KappaMode::Estimated { cap } => cap,
        };
        if v >= 0.0 && v < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("kappa must lie in [0, 1), got {v}")))
        }
    }
}

/// Noise keys used by the calibration rollouts of successive episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationNoise {
    /// New noise draws every episode.
    #[default]
    Fresh,
    /// The same `n_j` noise sequences every episode.
    Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub dr_tol: f64,
    pub dpi_tol: f64,
    /// Consecutive episodes below both tolerances.
    pub consecutive: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            dr_tol: 1e-3,
            dpi_tol: 1e-3,
            consecutive: 2,
        }
    }
}

/// Worst-case pre-run used when no initial radius is configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrerunConfig {
    /// Total rollouts, split over the `3^d` constant policies with controls
    /// in `{-u_max, 0, u_max}`.
    pub rollouts: usize,
    pub safety_factor: f64,
}

impl Default for PrerunConfig {
    fn default() -> Self {
        Self {
            rollouts: 10_000,
            safety_factor: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRoots {
    pub calibration: u64,
    pub evaluation: u64,
    pub sensitivity: u64,
    pub prerun: u64,
}

impl SeedRoots {
    pub fn uniform(root: u64) -> Self {
        Self {
            calibration: root,
            evaluation: root,
            sensitivity: root,
            prerun: root,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub probe: ProbeConfig,
    /// Radius step of the planner finite difference.
    pub l_u_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub delta: f64,
    pub n_j: usize,
    pub n_eval: usize,
    /// Initial radius; derived by the pre-run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
    #[serde(default)]
    pub prerun: PrerunConfig,
    pub max_episodes: usize,
    #[serde(default)]
    pub stop: StopRule,
    pub interval: RadiusInterval,
    pub seeds: SeedRoots,
    pub solver: SolverKind,
    pub bisect_tol: f64,
    pub kappa: KappaMode,
    #[serde(default)]
    pub calibration_noise: CalibrationNoise,
    #[serde(default)]
    pub best_effort: bool,
    pub x0: State,
    pub y0: State,
    pub pedestrian: PedestrianModel,
    pub planner: PlannerConfig,
    pub sensitivity: SensitivityConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("alpha and delta must lie in (0, 1), got {} and {}", self.alpha, self.delta));
        }
        if self.n_j == 0 || self.n_eval == 0 {
            return bad("n_j and n_eval must be at least 1".into());
        }
        if self.max_episodes == 0 {
            return bad("max_episodes must be at least 1".into());
        }
        if self.stop.consecutive == 0 || !(self.stop.dr_tol >= 0.0) || !(self.stop.dpi_tol >= 0.0) {
            return bad(format!("invalid stop rule {:?}", self.stop));
        }
        self.interval.validate()?;
        if let Some(r0) = self.r0 {
            if !self.interval.contains(r0) {
                return bad(format!(
                    "r0 = {r0} outside the radius interval [{}, {}]",
                    self.interval.r_min, self.interval.r_max
                ));
            }
        }
        if !(self.prerun.rollouts > 0 && self.prerun.safety_factor >= 1.0) {
            return bad(format!("invalid pre-run settings {:?}", self.prerun));
        }
        if !(self.bisect_tol > 0.0) {
            return bad(format!("bisect_tol must be > 0, got {}", self.bisect_tol));
        }
        self.kappa.validate()?;
        self.pedestrian.validate()?;
        self.planner.validate()?;
        if self.x0.dim() != 2 || self.y0.dim() != 2 || self.planner.x_goal.dim() != 2 {
            return bad("x0, y0 and x_goal must be planar".into());
        }
        if self.planner.dt != self.pedestrian.dt {
            return bad(format!(
                "planner dt = {} differs from pedestrian dt = {}",
                self.planner.dt, self.pedestrian.dt
            ));
        }
        let s = &self.sensitivity;
        if !(s.probe.magnitude > 0.0) || s.probe.n_probe == 0 || !(s.l_u_step > 0.0) {
            return bad(format!("invalid sensitivity settings {s:?}"));
        }
        if s.l_u_step > self.interval.r_min && matches!(self.kappa, KappaMode::Estimated { .. }) {
            return bad(format!(
                "l_u_step = {} must not exceed r_min = {} when kappa is estimated",
                s.l_u_step, self.interval.r_min
            ));
        }
        Ok(())
    }

    pub fn scene(&self) -> Result<Scene<SingleIntegrator, PedestrianModel>> {
        Ok(Scene {
            ego: SingleIntegrator::new(self.planner.dt)?,
            env: self.pedestrian,
            x0: self.x0.clone(),
            y0: self.y0.clone(),
        })
    }

    pub fn prediction(&self) -> Trajectory {
        predict_nominal(&self.y0, &self.pedestrian, self.planner.horizon)
    }

    fn calibration_key(&self, episode: usize, i: usize) -> SeedKey {
        let ep = match self.calibration_noise {
            CalibrationNoise::Fresh => episode as u32,
            CalibrationNoise::Common => 0,
        };
        SeedKey::new(self.seeds.calibration, Stream::Calibration, ep, i as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub j: usize,
    pub r: f64,
    pub q: f64,
    pub alpha_bar: f64,
    pub kappa_raw: f64,
    pub kappa_used: f64,
    pub policy: Policy,
    pub cost: f64,
    pub tube_coverage: f64,
    pub safety_coverage: f64,
    /// `|r_{j+1} - r_j|`.
    pub dr: f64,
    /// `||pi_{j+1} - pi_j||_inf`.
    pub dpi: f64,
    /// The next plan `P[j+1; r_{j+1}]` was solved feasibly and its radius
    /// passed the safety inequality.
    pub feasible: bool,
    pub r_next: f64,
    pub beta_t: Option<f64>,
    pub l_u: Option<f64>,
    pub branch: Branch,
    pub projected: bool,
    pub probes: usize,
    #[serde(skip)]
    pub scores: ScoreSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    /// Stop rule met.
    Converged,
    MaxEpisodes,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub r0: f64,
    pub records: Vec<EpisodeRecord>,
    pub termination: Termination,
}

impl RunReport {
    pub fn aborted(&self) -> bool {
        matches!(self.termination, Termination::Aborted(_))
    }
}

/// Fractions of scores within `r` and of safety values `<= 0`.
pub fn coverage_fractions(scores: &[f64], safety: &[f64], r: f64) -> (f64, f64) {
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    (
        frac(scores.iter().filter(|&&s| s <= r).count(), scores.len()),
        frac(safety.iter().filter(|&&h| h <= 0.0).count(), safety.len()),
    )
}

/// Scores against `y_hat` and safety values of `n` rollouts of `policy`.
pub fn sample_rollouts<F>(
    scene: &Scene<SingleIntegrator, PedestrianModel>,
    y_hat: &Trajectory,
    policy: &Policy,
    d_min: f64,
    n: usize,
    key: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize) -> SeedKey + Sync,
{
    let horizon = policy.horizon();
    let results: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let noise = scene.noise(key(i), horizon);
            let (x, y) = scene.rollout(policy, &noise)?;
            Ok((score(y_hat, &y)?, safety_eval(&x, &y, d_min)?))
        })
        .collect();
    let mut scores = Vec::with_capacity(n);
    let mut safety = Vec::with_capacity(n);
    for res in results {
        let (s, h) = res?;
        scores.push(s);
        safety.push(h);
    }
    Ok((scores, safety))
}

/// Tube and safety coverage of `(policy, r)` on `n_eval` rollouts from the
/// evaluation stream.
pub fn evaluate_coverage(
    cfg: &RunConfig,
    policy: &Policy,
    r: f64,
    episode: usize,
) -> Result<(f64, f64)> {
    let scene = cfg.scene()?;
    let y_hat = cfg.prediction();
    let root = cfg.seeds.evaluation;
    let (scores, safety) = sample_rollouts(&scene, &y_hat, policy, cfg.planner.d_min, cfg.n_eval, |i| {
        SeedKey::new(root, Stream::Evaluation, episode as u32, i as u32)
    })?;
    Ok(coverage_fractions(&scores, &safety, r))
}

/// `safety_factor * max score` over constant extreme policies.
pub fn prerun_radius(cfg: &RunConfig) -> Result<f64> {
    let scene = cfg.scene()?;
    let y_hat = cfg.prediction();
    let u = cfg.planner.u_max;
    let levels = [-u, 0.0, u];
    let policies: Vec<Policy> = levels
        .iter()
        .flat_map(|&a| levels.iter().map(move |&b| Policy::constant(cfg.planner.horizon, State::xy(a, b))))
        .collect();
    let per = cfg.prerun.rollouts.div_ceil(policies.len());
    let mut worst: f64 = 0.0;
    for (p, policy) in policies.iter().enumerate() {
        let root = cfg.seeds.prerun;
        let (scores, _) = sample_rollouts(&scene, &y_hat, policy, cfg.planner.d_min, per, |i| {
            SeedKey::new(root, Stream::Prerun, p as u32, i as u32)
        })?;
        worst = scores.into_iter().fold(worst, f64::max);
    }
    Ok(cfg.prerun.safety_factor * worst)
}

struct Step {
    update: UpdateOutcome,
    kappa_raw: f64,
    kappa_used: f64,
    beta_t: Option<f64>,
    l_u: Option<f64>,
    failure: Option<Error>,
}

/// Run the episodic loop. Errors raised before the first episode is
/// recorded are returned directly; later aborts end the run with
/// [`Termination::Aborted`] after recording the failing episode.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let y_hat = cfg.prediction();
    let planner = Planner::new(cfg.planner.clone())?;
    let ctx = PlannerContext {
        planner: &planner,
        y_hat: &y_hat,
        x0: &cfg.x0,
    };

    let r0 = match cfg.r0 {
        Some(r) => r,
        None => {
            let r = prerun_radius(cfg)?;
            info!("pre-run radius r0 = {r:.6}");
            if !cfg.interval.contains(r) {
                return Err(Error::Config(format!(
                    "pre-run radius {r} outside the radius interval [{}, {}]",
                    cfg.interval.r_min, cfg.interval.r_max
                )));
            }
            r
        }
    };

    let first = planner.solve(r0, &y_hat, &cfg.x0, None)?;
    if !first.feasible {
        return Err(Error::Infeasible {
            radius: r0,
            reason: "initial plan P[0; r0] is infeasible".into(),
        });
    }

    let mut records = Vec::new();
    let mut r = r0;
    let mut plan = first;
    let mut calm = 0usize;
    for j in 0..cfg.max_episodes {
        let policy = plan.policy.clone();
        let (scores, _) = sample_rollouts(&scene, &y_hat, &policy, cfg.planner.d_min, cfg.n_j, |i| {
            cfg.calibration_key(j, i)
        })?;
        let scores = ScoreSet::new(scores, j)?;
        let cal = match calibrate(&scores, cfg.alpha, cfg.delta) {
            Ok(c) => c,
            Err(e) if records.is_empty() => return Err(e),
            Err(e) => return Ok(abort(r0, records, e)),
        };
        let (tube_coverage, safety_coverage) = evaluate_coverage(cfg, &policy, r, j)?;

        let step = next_radius(cfg, &scene, &ctx, &policy, r, cal.q, j)?;
        let r_next = step.update.r_next;
        let next_plan = planner.solve(r_next, &y_hat, &cfg.x0, Some(&policy))?;
        let mut failure = step.failure;
        if !next_plan.feasible && failure.is_none() {
            failure = Some(infeasible(r_next, &next_plan));
        }
        let dr = (r_next - r).abs();
        let dpi = next_plan.policy.dist_inf(&policy)?;
        info!(
            "episode {j}: r = {r:.6} q = {:.6} kappa = {:.4} -> r' = {r_next:.6} dr = {dr:.2e} dpi = {dpi:.2e} cov = {tube_coverage:.3}/{safety_coverage:.3}",
            cal.q, step.kappa_used
        );
        records.push(EpisodeRecord {
            j,
            r,
            q: cal.q,
            alpha_bar: cal.alpha_bar,
            kappa_raw: step.kappa_raw,
            kappa_used: step.kappa_used,
            policy,
            cost: plan.cost,
            tube_coverage,
            safety_coverage,
            dr,
            dpi,
            feasible: failure.is_none(),
            r_next,
            beta_t: step.beta_t,
            l_u: step.l_u,
            branch: step.update.branch,
            projected: step.update.projected,
            probes: step.update.probes,
            scores,
        });
        if let Some(e) = failure {
            if !cfg.best_effort {
                return Ok(abort(r0, records, e));
            }
            warn!("episode {j}: continuing unsafely in best-effort mode: {e}");
        }

        calm = if dr < cfg.stop.dr_tol && dpi < cfg.stop.dpi_tol { calm + 1 } else { 0 };
        r = r_next;
        plan = next_plan;
        if calm >= cfg.stop.consecutive {
            return Ok(RunReport {
                r0,
                records,
                termination: Termination::Converged,
            });
        }
    }
    Ok(RunReport {
        r0,
        records,
        termination: Termination::MaxEpisodes,
    })
}

fn abort(r0: f64, records: Vec<EpisodeRecord>, e: Error) -> RunReport {
    warn!("run aborted: {e}");
    RunReport {
        r0,
        records,
        termination: Termination::Aborted(e.to_string()),
    }
}

fn infeasible(r: f64, plan: &PlanResult) -> Error {
    Error::Infeasible {
        radius: r,
        reason: format!(
            "next plan: slack {:.3e}, stationarity {:.3e}",
            plan.constraint_slack, plan.diagnostics.stationarity
        ),
    }
}

/// Gain estimate and radius update for one episode. Recoverable failures
/// fall back to `r_max` (or the gain cap) and are reported in `failure`.
fn next_radius(
    cfg: &RunConfig,
    scene: &Scene<SingleIntegrator, PedestrianModel>,
    ctx: &PlannerContext<'_>,
    policy: &Policy,
    r: f64,
    q: f64,
    j: usize,
) -> Result<Step> {
    let mut failure = None;
    let needs_beta = matches!(cfg.kappa, KappaMode::Estimated { .. }) || cfg.solver == SolverKind::Implicit;
    let beta_t = if needs_beta {
        Some(beta_t_empirical(scene, policy, &cfg.sensitivity.probe, cfg.seeds.sensitivity, j as u32)?)
    } else {
        None
    };
    let (kappa_raw, kappa_used, l_u) = match cfg.kappa {
        KappaMode::Fixed { value } => (value, value, None),
        KappaMode::Estimated { cap } => match l_u_empirical(ctx, r, cfg.sensitivity.l_u_step, policy) {
            Ok(l_u) => {
                let raw = kappa(beta_t.unwrap_or(0.0), l_u)?.value;
                (raw, raw.min(cap), Some(l_u))
            }
            Err(e) => {
                failure = Some(e);
                (f64::NAN, cap, None)
            }
        },
    };
    let update = match cfg.solver {
        SolverKind::Explicit => explicit_update_projected(q, r, kappa_used, &cfg.interval),
        SolverKind::Implicit => implicit_update(
            q,
            policy,
            beta_t.unwrap_or(0.0),
            &cfg.interval,
            cfg.bisect_tol,
            ctx,
        ),
    };
    let update = match update {
        Ok(u) => u,
        Err(e @ (Error::NoSafeRadius { .. } | Error::Infeasible { .. })) => {
            failure.get_or_insert(e);
            UpdateOutcome {
                r_next: cfg.interval.r_max,
                branch: match cfg.solver {
                    SolverKind::Explicit => Branch::Expansion,
                    SolverKind::Implicit => Branch::Bisection,
                },
                projected: true,
                slack: f64::NAN,
                probes: 0,
            }
        }
        Err(e) => return Err(e),
    };
    Ok(Step {
        update,
        kappa_raw,
        kappa_used,
        beta_t,
        l_u,
        failure,
    })
}
