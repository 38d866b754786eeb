//! Robust episodic planner for the single-integrator ego car.
//!
//! Minimizes `w_goal ||x_T - x_goal||^2 + w_track sum ||u_t||^2` subject to
//! the box `|u_{t,i}| <= u_max` and the tube-tightened separation
//! `||x_t - y_hat_t|| >= d_min + r` for `t = 1..T` (`x_0` is fixed and only
//! checked). The separation constraint is nonconvex.
//!
//! Method: penalty continuation with multiplier updates (augmented
//! Lagrangian with the smooth squared hinge), the penalty weight growing by a
//! constant factor per stage. Each stage is minimized by a projected
//! Gauss-Newton method with Armijo backtracking on the box. Everything is
//! deterministic in the inputs and the warm start.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_ego, Policy, SingleIntegrator, State, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTolerances {
    /// Allowed constraint violation for a plan to count as feasible.
    pub tol_feas: f64,
    /// Projected-gradient stop for each inner minimization.
    pub grad_tol: f64,
    /// Stationarity of the Lagrangian required to report convergence.
    pub stationarity_tol: f64,
    pub max_inner_iterations: usize,
    pub penalty_stages: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            tol_feas: 1e-6,
            grad_tol: 1e-8,
            stationarity_tol: 1e-5,
            max_inner_iterations: 5000,
            penalty_stages: 8,
            penalty_init: 10.0,
            penalty_growth: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub x_goal: State,
    pub w_goal: f64,
    pub w_track: f64,
    pub d_min: f64,
    pub u_max: f64,
    pub horizon: usize,
    pub dt: f64,
    #[serde(default)]
    pub tolerances: SolverTolerances,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        let ok = self.d_min > 0.0
            && self.u_max > 0.0
            && self.w_goal >= 0.0
            && self.w_track >= 0.0
            && self.dt > 0.0
            && self.horizon > 0
            && self.x_goal.is_finite()
            && t.tol_feas > 0.0
            && t.grad_tol > 0.0
            && t.stationarity_tol > 0.0
            && t.penalty_init > 0.0
            && t.penalty_growth >= 1.0
            && t.penalty_stages > 0
            && t.max_inner_iterations > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid planner configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub stages: usize,
    pub inner_iterations: usize,
    pub max_violation: f64,
    pub stationarity: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub policy: Policy,
    pub ego_traj: Trajectory,
    pub cost: f64,
    pub feasible: bool,
    /// `min_t (||x_t - y_hat_t|| - d_min - r)` over `t = 0..T`.
    pub constraint_slack: f64,
    pub diagnostics: SolveDiagnostics,
}

/// `max_t (d_min - ||x_t - y_t||)`; nonpositive means safe.
pub fn safety_eval(x: &Trajectory, y: &Trajectory, d_min: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.states
        .iter()
        .zip(&y.states)
        .map(|(a, b)| d_min - a.dist(b))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Sufficient condition for the tube-robust constraint:
/// `H(x, y_hat) <= -L_H r`.
pub fn feasibility_sufficient(
    r: f64,
    y_hat: &Trajectory,
    x: &Trajectory,
    d_min: f64,
    lipschitz_h: f64,
) -> Result<bool> {
    Ok(safety_eval(x, y_hat, d_min)? <= -lipschitz_h * r)
}

/// Workspace for one solve: fixed problem data plus the flattened layout.
struct Problem<'a> {
    cfg: &'a PlannerConfig,
    x0: &'a State,
    y_hat: &'a Trajectory,
    required: f64,
    dim: usize,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    /// Positions `x_0..x_T`.
    xs: Vec<State>,
}

impl<'a> Problem<'a> {
    fn n(&self) -> usize {
        self.cfg.horizon * self.dim
    }

    fn positions(&self, u: &[f64]) -> Vec<State> {
        let mut xs = Vec::with_capacity(self.cfg.horizon + 1);
        xs.push(self.x0.clone());
        for t in 0..self.cfg.horizon {
            let ut = State(u[t * self.dim..(t + 1) * self.dim].to_vec());
            let next = xs[t].axpy(self.cfg.dt, &ut);
            xs.push(next);
        }
        xs
    }

    fn cost_of(&self, u: &[f64], xs: &[State]) -> f64 {
        let terminal = xs[self.cfg.horizon].sub(&self.cfg.x_goal).norm();
        let effort: f64 = u.iter().map(|v| v * v).sum();
        self.cfg.w_goal * terminal * terminal + self.cfg.w_track * effort
    }

    /// `c_t = required - ||x_t - y_hat_t||` for `t = 1..T` plus the unit
    /// direction `e_t` (separation) used in the gradients.
    fn constraints(&self, xs: &[State]) -> Vec<(f64, State)> {
        (1..=self.cfg.horizon)
            .map(|t| {
                let z = xs[t].sub(&self.y_hat.states[t]);
                let dist = z.norm();
                let e = if dist > 0.0 {
                    z.scale(1.0 / dist)
                } else {
                    // any unit vector is a valid subgradient direction
                    let mut e = State::zeros(self.dim);
                    e.0[0] = 1.0;
                    e
                };
                (self.required - dist, e)
            })
            .collect()
    }

    fn cost_grad(&self, u: &[f64], xs: &[State]) -> DVector<f64> {
        let cfg = self.cfg;
        let terminal = xs[cfg.horizon].sub(&cfg.x_goal);
        DVector::from_fn(self.n(), |i, _| {
            let comp = i % self.dim;
            2.0 * cfg.w_goal * cfg.dt * terminal.0[comp] + 2.0 * cfg.w_track * u[i]
        })
    }

    /// Gradient of `c_t` with respect to the flattened controls, written
    /// into `out` (zero for `s >= t`).
    fn constraint_grad(&self, t: usize, e: &State, out: &mut DVector<f64>) {
        out.fill(0.0);
        for s in 0..t {
            for k in 0..self.dim {
                out[s * self.dim + k] = -self.cfg.dt * e.0[k];
            }
        }
    }

    fn augmented(&self, u: &[f64], lambda: &[f64], rho: f64) -> Eval {
        let xs = self.positions(u);
        let mut value = self.cost_of(u, &xs);
        let mut grad = self.cost_grad(u, &xs);
        let mut gc = DVector::zeros(self.n());
        for (idx, (c, e)) in self.constraints(&xs).into_iter().enumerate() {
            let shifted = lambda[idx] + rho * c;
            let mu = shifted.max(0.0);
            value += (mu * mu - lambda[idx] * lambda[idx]) / (2.0 * rho);
            if mu > 0.0 {
                self.constraint_grad(idx + 1, &e, &mut gc);
                grad.axpy(mu, &gc, 1.0);
            }
        }
        Eval { value, grad, xs }
    }

    fn gauss_newton_hessian(&self, xs: &[State], lambda: &[f64], rho: f64) -> DMatrix<f64> {
        let cfg = self.cfg;
        let n = self.n();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i % self.dim == j % self.dim {
                    h[(i, j)] += 2.0 * cfg.w_goal * cfg.dt * cfg.dt;
                }
            }
            h[(i, i)] += 2.0 * cfg.w_track;
        }
        let mut gc = DVector::zeros(n);
        for (idx, (c, e)) in self.constraints(xs).into_iter().enumerate() {
            if lambda[idx] + rho * c > 0.0 {
                self.constraint_grad(idx + 1, &e, &mut gc);
                h.ger(rho, &gc, &gc, 1.0);
            }
        }
        h
    }

    fn project(&self, u: &mut [f64]) {
        let b = self.cfg.u_max;
        for v in u {
            *v = v.clamp(-b, b);
        }
    }

    fn projected_grad_norm(&self, u: &[f64], g: &DVector<f64>) -> f64 {
        let b = self.cfg.u_max;
        u.iter()
            .zip(g.iter())
            .map(|(&ui, &gi)| (ui - (ui - gi).clamp(-b, b)).abs())
            .fold(0.0, f64::max)
    }

    /// Projected Gauss-Newton on the augmented Lagrangian. Returns the number
    /// of iterations used.
    fn minimize_stage(&self, u: &mut Vec<f64>, lambda: &[f64], rho: f64) -> usize {
        let tol = &self.cfg.tolerances;
        let b = self.cfg.u_max;
        let n = self.n();
        let mut cur = self.augmented(u, lambda, rho);
        for iter in 0..tol.max_inner_iterations {
            let pg = self.projected_grad_norm(u, &cur.grad);
            if pg <= tol.grad_tol {
                return iter;
            }
            let eps = pg.min(1e-6);
            let bound_active: Vec<bool> = (0..n)
                .map(|i| {
                    (u[i] <= -b + eps && cur.grad[i] > 0.0) || (u[i] >= b - eps && cur.grad[i] < 0.0)
                })
                .collect();
            let free: Vec<usize> = (0..n).filter(|&i| !bound_active[i]).collect();

            let h = self.gauss_newton_hessian(&cur.xs, lambda, rho);
            let mut dir = DVector::zeros(n);
            for i in 0..n {
                if bound_active[i] {
                    dir[i] = -cur.grad[i] / h[(i, i)].max(1e-12);
                }
            }
            if !free.is_empty() {
                let m = free.len();
                let hf = DMatrix::from_fn(m, m, |a, c| h[(free[a], free[c])]);
                let gf = DVector::from_fn(m, |a, _| cur.grad[free[a]]);
                let step = match hf.clone().cholesky() {
                    Some(ch) => ch.solve(&(-&gf)),
                    None => {
                        // regularize until positive definite
                        let scale = hf.diagonal().amax().max(1.0);
                        let mut reg = 1e-10 * scale;
                        loop {
                            let shifted = &hf + DMatrix::identity(m, m) * reg;
                            if let Some(ch) = shifted.cholesky() {
                                break ch.solve(&(-&gf));
                            }
                            reg *= 10.0;
                        }
                    }
                };
                for (a, &i) in free.iter().enumerate() {
                    dir[i] = step[a];
                }
            }

            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial: Vec<f64> = u.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
                self.project(&mut trial);
                let decrease: f64 = (0..n).map(|i| cur.grad[i] * (trial[i] - u[i])).sum();
                let next = self.augmented(&trial, lambda, rho);
                if next.value <= cur.value + 1e-4 * decrease && decrease <= 0.0 {
                    let moved = trial
                        .iter()
                        .zip(u.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    *u = trial;
                    cur = next;
                    accepted = true;
                    if moved == 0.0 {
                        return iter + 1;
                    }
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return iter + 1;
            }
        }
        tol.max_inner_iterations
    }

    /// Hessian of the Lagrangian `J + sum lambda_t c_t` in the controls.
    fn lagrangian_hessian(&self, xs: &[State], lambda: &[f64]) -> DMatrix<f64> {
        let cfg = self.cfg;
        let d = self.dim;
        let mut h = self.gauss_newton_hessian(xs, &vec![0.0; cfg.horizon], 0.0);
        for (idx, (_, e)) in self.constraints(xs).into_iter().enumerate() {
            let t = idx + 1;
            if lambda[idx] == 0.0 {
                continue;
            }
            let dist = xs[t].dist(&self.y_hat.states[t]).max(1e-12);
            // c_t = required - ||x_t - y_hat_t||, so its Hessian in x_t is
            // -(I - e e^T) / dist
            let w = -lambda[idx] * cfg.dt * cfg.dt / dist;
            for a in 0..t * d {
                for b in 0..t * d {
                    let (ka, kb) = (a % d, b % d);
                    let proj = if ka == kb { 1.0 } else { 0.0 } - e.0[ka] * e.0[kb];
                    h[(a, b)] += w * proj;
                }
            }
        }
        h
    }

    /// Newton iterations on the KKT system of the currently active
    /// constraints and bounds. Returns the refined point and multipliers
    /// when they form a better KKT point than the input.
    fn polish(&self, u: &[f64], lambda: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let cfg = self.cfg;
        let tol = &cfg.tolerances;
        let b = cfg.u_max;
        let n = self.n();
        let base = self.lagrangian_stationarity(u, lambda);

        let xs = self.positions(u);
        let cons = self.constraints(&xs);
        let mut active: Vec<usize> = (0..cfg.horizon)
            .filter(|&i| lambda[i] > 0.0 || cons[i].0 > -tol.tol_feas)
            .collect();

        for _attempt in 0..cfg.horizon + 1 {
            let mut cur = u.to_vec();
            let mut lam = vec![0.0; cfg.horizon];
            for &i in &active {
                lam[i] = lambda[i];
            }
            let mut ok = true;
            for _ in 0..30 {
                let xs = self.positions(&cur);
                let cons = self.constraints(&xs);
                let mut grad = self.cost_grad(&cur, &xs);
                let mut gc = DVector::zeros(n);
                let mut jac = Vec::with_capacity(active.len());
                for &i in &active {
                    self.constraint_grad(i + 1, &cons[i].1, &mut gc);
                    grad.axpy(lam[i], &gc, 1.0);
                    jac.push(gc.clone());
                }
                let fixed: Vec<bool> = (0..n)
                    .map(|k| (cur[k] >= b && grad[k] < 0.0) || (cur[k] <= -b && grad[k] > 0.0))
                    .collect();
                let free: Vec<usize> = (0..n).filter(|&k| !fixed[k]).collect();
                let (m, p) = (free.len(), active.len());
                let h = self.lagrangian_hessian(&xs, &lam);
                let mut kkt = DMatrix::zeros(m + p, m + p);
                let mut rhs = DVector::zeros(m + p);
                for (a, &i) in free.iter().enumerate() {
                    for (c, &k) in free.iter().enumerate() {
                        kkt[(a, c)] = h[(i, k)];
                    }
                    for (c, g) in jac.iter().enumerate() {
                        kkt[(a, m + c)] = g[i];
                        kkt[(m + c, a)] = g[i];
                    }
                    rhs[a] = -grad[i];
                }
                for (c, &i) in active.iter().enumerate() {
                    rhs[m + c] = -cons[i].0;
                }
                let residual = rhs.amax();
                if residual <= 1e-14 {
                    break;
                }
                let Some(step) = kkt.lu().solve(&rhs) else {
                    ok = false;
                    break;
                };
                for (a, &i) in free.iter().enumerate() {
                    cur[i] += step[a];
                }
                for (c, &i) in active.iter().enumerate() {
                    lam[i] += step[m + c];
                }
                if cur.iter().any(|v| v.abs() > b * (1.0 + 1e-12)) || !step.iter().all(|v| v.is_finite()) {
                    ok = false;
                    break;
                }
            }
            if !ok {
                return None;
            }
            self.project(&mut cur);
            if let Some(&neg) = active.iter().find(|&&i| lam[i] < 0.0) {
                active.retain(|&i| i != neg);
                continue;
            }
            let xs = self.positions(&cur);
            let worst = self.constraints(&xs).iter().fold(f64::NEG_INFINITY, |m, c| m.max(c.0));
            let stat = self.lagrangian_stationarity(&cur, &lam);
            if worst <= tol.tol_feas * 1e-3 && stat < base {
                return Some((cur, lam));
            }
            return None;
        }
        None
    }

    /// Stationarity of `J + lambda^T c` on the box, i.e. the projected
    /// gradient of the Lagrangian.
    fn lagrangian_stationarity(&self, u: &[f64], lambda: &[f64]) -> f64 {
        let xs = self.positions(u);
        let mut grad = self.cost_grad(u, &xs);
        let mut gc = DVector::zeros(self.n());
        for (idx, (_, e)) in self.constraints(&xs).into_iter().enumerate() {
            if lambda[idx] > 0.0 {
                self.constraint_grad(idx + 1, &e, &mut gc);
                grad.axpy(lambda[idx], &gc, 1.0);
            }
        }
        self.projected_grad_norm(u, &grad)
    }
}

/// The case-study planner for one fixed problem geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    pub cfg: PlannerConfig,
    ego: SingleIntegrator,
}

impl Planner {
    pub fn new(cfg: PlannerConfig) -> Result<Self> {
        cfg.validate()?;
        let ego = SingleIntegrator::new(cfg.dt)?;
        Ok(Self { cfg, ego })
    }

    pub fn ego(&self) -> &SingleIntegrator {
        &self.ego
    }

    /// Cost `J` of a policy from `x0`.
    pub fn cost(&self, policy: &Policy, x0: &State) -> Result<f64> {
        let traj = simulate_ego(&self.ego, policy, x0)?;
        let terminal = traj.states[traj.horizon()].sub(&self.cfg.x_goal).norm();
        let effort: f64 = policy.controls.iter().map(|u| u.norm().powi(2)).sum();
        Ok(self.cfg.w_goal * terminal * terminal + self.cfg.w_track * effort)
    }

    pub fn solve(
        &self,
        r: f64,
        y_hat: &Trajectory,
        x0: &State,
        warm_start: Option<&Policy>,
    ) -> Result<PlanResult> {
        let cfg = &self.cfg;
        let dim = x0.dim();
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!("radius must be finite and >= 0, got {r}")));
        }
        if !x0.is_finite() || y_hat.states.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("planner input"));
        }
        if y_hat.len() != cfg.horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: cfg.horizon + 1,
                got: y_hat.len(),
            });
        }
        if cfg.x_goal.dim() != dim || y_hat.states.iter().any(|s| s.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: cfg.x_goal.dim(),
            });
        }
        let problem = Problem {
            cfg,
            x0,
            y_hat,
            required: cfg.d_min + r,
            dim,
        };

        let mut u: Vec<f64> = match warm_start {
            Some(p) => {
                if p.horizon() != cfg.horizon || p.control_dim() != dim {
                    return Err(Error::LengthMismatch {
                        expected: cfg.horizon,
                        got: p.horizon(),
                    });
                }
                p.to_flat()
            }
            None => vec![0.0; problem.n()],
        };
        problem.project(&mut u);

        let initial_gap = x0.dist(&y_hat.states[0]) - problem.required;
        if initial_gap < -cfg.tolerances.tol_feas {
            let policy = Policy::from_flat(&u, dim);
            return self.finish(policy, x0, y_hat, r, SolveDiagnostics::default(), false);
        }

        let tol = &cfg.tolerances;
        let mut lambda = vec![0.0; cfg.horizon];
        let mut rho = tol.penalty_init;
        let mut diag = SolveDiagnostics::default();
        for stage in 0..tol.penalty_stages {
            let before = u.clone();
            diag.inner_iterations += problem.minimize_stage(&mut u, &lambda, rho);
            diag.stages = stage + 1;

            let xs = problem.positions(&u);
            let cons = problem.constraints(&xs);
            let mut lambda_change: f64 = 0.0;
            let mut violation: f64 = 0.0;
            for (idx, (c, _)) in cons.iter().enumerate() {
                let updated = (lambda[idx] + rho * c).max(0.0);
                lambda_change = lambda_change.max((updated - lambda[idx]).abs());
                lambda[idx] = updated;
                violation = violation.max(*c);
            }
            let moved = u
                .iter()
                .zip(&before)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let lam_scale = 1.0 + lambda.iter().fold(0.0_f64, |m, l| m.max(*l));
            if stage > 0 && violation <= 1e-3 * tol.tol_feas && lambda_change <= 1e-9 * lam_scale && moved <= 1e-10 {
                break;
            }
            rho *= tol.penalty_growth;
        }
        if let Some((refined, multipliers)) = problem.polish(&u, &lambda) {
            u = refined;
            lambda = multipliers;
        }
        diag.stationarity = problem.lagrangian_stationarity(&u, &lambda);
        diag.converged = diag.stationarity <= tol.stationarity_tol;
        let policy = Policy::from_flat(&u, dim);
        self.finish(policy, x0, y_hat, r, diag, true)
    }

    fn finish(
        &self,
        policy: Policy,
        x0: &State,
        y_hat: &Trajectory,
        r: f64,
        mut diag: SolveDiagnostics,
        solved: bool,
    ) -> Result<PlanResult> {
        let ego_traj = simulate_ego(&self.ego, &policy, x0)?;
        let required = self.cfg.d_min + r;
        let constraint_slack = ego_traj
            .states
            .iter()
            .zip(&y_hat.states)
            .map(|(x, y)| x.dist(y) - required)
            .fold(f64::INFINITY, f64::min);
        diag.max_violation = (-constraint_slack).max(0.0);
        let cost = self.cost(&policy, x0)?;
        let finite = cost.is_finite() && ego_traj.states.iter().all(State::is_finite);
        let feasible = solved
            && finite
            && diag.converged
            && constraint_slack >= -self.cfg.tolerances.tol_feas;
        debug!(
            "solve r={r:.6} feasible={feasible} cost={cost:.6e} slack={constraint_slack:.3e} stages={} iters={} stationarity={:.2e}",
            diag.stages, diag.inner_iterations, diag.stationarity
        );
        Ok(PlanResult {
            policy,
            ego_traj,
            cost,
            feasible,
            constraint_slack,
            diagnostics: diag,
        })
    }
}

/// Radius-to-policy map `r -> pi*(r)`, treated as a black box by the
/// sensitivity estimator and the implicit radius solver.
pub trait PolicyMap {
    fn policy_at(&self, r: f64, warm_start: &Policy) -> Result<Policy>;
}

/// The planner bound to one problem geometry.
pub struct PlannerContext<'a> {
    pub planner: &'a Planner,
    pub y_hat: &'a Trajectory,
    pub x0: &'a State,
}

impl PolicyMap for PlannerContext<'_> {
    fn policy_at(&self, r: f64, warm_start: &Policy) -> Result<Policy> {
        let res = self.planner.solve(r, self.y_hat, self.x0, Some(warm_start))?;
        if !res.feasible {
            return Err(Error::Infeasible {
                radius: r,
                reason: format!(
                    "slack {:.3e}, stationarity {:.3e}",
                    res.constraint_slack, res.diagnostics.stationarity
                ),
            });
        }
        Ok(res.policy)
    }
}
