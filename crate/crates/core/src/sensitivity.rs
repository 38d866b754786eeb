//! Coupling sensitivity `beta_T`, planner sensitivity `L_U` and the
//! closed-loop gain `kappa = beta_T * L_U`.
//!
//! `beta_T` is available in closed form from Lipschitz constants of the
//! dynamics, and empirically from symmetric finite differences of paired
//! rollouts that share one noise sequence. `L_U` is only estimated
//! empirically, from two planner solves at `r +- h`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{EgoDynamics, EnvDynamics, NoiseSequence, Policy, Scene, State};
use crate::error::{Error, Result};
use crate::planner::PolicyMap;
use crate::seeds::{SeedKey, Stream};

/// Lipschitz constants of `f_X` and `f_Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzInputs {
    pub l_xx: f64,
    pub l_xu: f64,
    pub l_yy: f64,
    pub l_yx: f64,
    pub l_yu: f64,
}

impl LipschitzInputs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_xx, self.l_xu, self.l_yy, self.l_yx, self.l_yu];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("Lipschitz constants must be >= 0: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConstants {
    pub lipschitz: LipschitzInputs,
    pub a_t: f64,
    pub beta_t: f64,
    pub l_u: f64,
    pub kappa: f64,
}

impl SensitivityConstants {
    pub fn from_lipschitz(lipschitz: LipschitzInputs, horizon: usize, l_u: f64) -> Result<Self> {
        let (a_t, beta_t) = beta_t_analytic(&lipschitz, horizon)?;
        Ok(Self {
            lipschitz,
            a_t,
            beta_t,
            l_u,
            kappa: beta_t * l_u,
        })
    }
}

/// `sum_{t=0}^{T-1} l^t`
fn geometric_sum(l: f64, horizon: usize) -> f64 {
    if (l - 1.0).abs() < 1e-12 {
        horizon as f64
    } else {
        (l.powi(horizon as i32) - 1.0) / (l - 1.0)
    }
}

/// `A_T = L_Xu sum L_Xx^t` and `beta_T = (L_Yx A_T + L_Yu) sum L_Yy^t`.
pub fn beta_t_analytic(c: &LipschitzInputs, horizon: usize) -> Result<(f64, f64)> {
    c.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let a_t = c.l_xu * geometric_sum(c.l_xx, horizon);
    let beta_t = (c.l_yx * a_t + c.l_yu) * geometric_sum(c.l_yy, horizon);
    Ok((a_t, beta_t))
}

/// `max_t ||y_t(pi + dpi) - y_t(pi - dpi)|| / (2 ||dpi||_inf)` under one
/// shared noise sequence.
pub fn beta_t_ratio<E: EgoDynamics, V: EnvDynamics>(
    scene: &Scene<E, V>,
    policy: &Policy,
    perturbation: &Policy,
    noise: &NoiseSequence,
) -> Result<f64> {
    let size = perturbation.norm_inf();
    if !(size > 0.0) {
        return Err(Error::ZeroPerturbation);
    }
    let (_, y_plus) = scene.rollout(&policy.add(perturbation), noise)?;
    let (_, y_minus) = scene.rollout(&policy.sub(perturbation), noise)?;
    Ok(y_plus.dist_inf(&y_minus)? / (2.0 * size))
}

/// Perturbation with `||dpi_t||_2 = magnitude` at every step and a random
/// direction per step.
pub fn random_perturbation<R: Rng>(rng: &mut R, horizon: usize, dim: usize, magnitude: f64) -> Policy {
    let controls = (0..horizon)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let n = v.iter().map(|a: &f64| a * a).sum::<f64>().sqrt();
            if n > 1e-12 {
                break State(v.iter().map(|a| a * magnitude / n).collect());
            }
        })
        .collect();
    Policy { controls }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Perturbation size `||dpi||_inf`.
    pub magnitude: f64,
    pub n_probe: usize,
}

/// Maximum of [`beta_t_ratio`] over `n_probe` random directions. Probe `i`
/// uses noise and direction streams keyed by `(seed, episode, i)`.
pub fn beta_t_empirical<E: EgoDynamics, V: EnvDynamics>(
    scene: &Scene<E, V>,
    policy: &Policy,
    probe: &ProbeConfig,
    seed: u64,
    episode: u32,
) -> Result<f64> {
    if !(probe.magnitude > 0.0) {
        return Err(Error::ZeroPerturbation);
    }
    if probe.n_probe == 0 {
        return Err(Error::InvalidArgument("n_probe must be at least 1".into()));
    }
    let horizon = policy.horizon();
    let mut best: f64 = 0.0;
    for i in 0..probe.n_probe as u32 {
        let key = SeedKey::new(seed, Stream::Probe, episode, i);
        let mut rng = key.rng();
        let dpi = random_perturbation(&mut rng, horizon, policy.control_dim(), probe.magnitude);
        // the noise uses the odd half of the stream ids so it never aliases
        // the direction draws
        let noise_key = SeedKey::new(seed, Stream::Probe, episode, i | 0x8000_0000);
        let noise = scene.noise(noise_key, horizon);
        best = best.max(beta_t_ratio(scene, policy, &dpi, &noise)?);
    }
    Ok(best)
}

/// `||pi*(r + h) - pi*(r - h)||_inf / (2h)`, both solves warm-started from
/// the same policy.
pub fn l_u_empirical(map: &dyn PolicyMap, r: f64, h: f64, warm_start: &Policy) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::ZeroPerturbation);
    }
    if r - h < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step h = {h} exceeds radius r = {r}"
        )));
    }
    let hi = map
        .policy_at(r + h, warm_start)
        .map_err(|e| Error::SensitivityUnavailable(format!("solve at r + h: {e}")))?;
    let lo = map
        .policy_at(r - h, warm_start)
        .map_err(|e| Error::SensitivityUnavailable(format!("solve at r - h: {e}")))?;
    Ok(hi.dist_inf(&lo)? / (2.0 * h))
}

/// Closed-loop gain with its regime markers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub value: f64,
    /// `kappa < 1`: the explicit update is defined.
    pub update_valid: bool,
    /// `kappa < 1/3`: the radius recursion contracts.
    pub contraction: bool,
}

pub fn kappa(beta_t: f64, l_u: f64) -> Result<Gain> {
    if !(beta_t >= 0.0 && l_u >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sensitivities must be >= 0, got beta_T = {beta_t}, L_U = {l_u}"
        )));
    }
    let value = beta_t * l_u;
    Ok(Gain {
        value,
        update_valid: value < 1.0,
        contraction: value < 1.0 / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearEnv, PedestrianModel, SingleIntegrator, State};
    use crate::planner::{Planner, PlannerConfig, PlannerContext, SolverTolerances};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_examples() {
        let single = LipschitzInputs { l_xx: 1.0, l_xu: 0.1, l_yy: 1.0, l_yx: 0.0, l_yu: 0.0 };
        let (a_t, beta) = beta_t_analytic(&single, 5).unwrap();
        assert_relative_eq!(a_t, 0.5, epsilon = 1e-15);
        assert_eq!(beta, 0.0);

        // A_T = 0.5 via L_Xu = 0.5 / 3 over T = 3
        let c = LipschitzInputs { l_xx: 1.0, l_xu: 0.5 / 3.0, l_yy: 0.5, l_yx: 0.2, l_yu: 0.0 };
        let (a_t, beta) = beta_t_analytic(&c, 3).unwrap();
        assert_relative_eq!(a_t, 0.5, epsilon = 1e-15);
        assert_relative_eq!(beta, 0.175, epsilon = 1e-15);
    }

    #[test]
    fn analytic_monotone() {
        let base = LipschitzInputs { l_xx: 1.0, l_xu: 0.1, l_yy: 1.1, l_yx: 0.1, l_yu: 0.05 };
        let mut prev = (0.0, 0.0);
        for t in 1..12 {
            let cur = beta_t_analytic(&base, t).unwrap();
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
        let (_, b0) = beta_t_analytic(&base, 5).unwrap();
        for bump in [
            LipschitzInputs { l_xx: 1.2, ..base },
            LipschitzInputs { l_xu: 0.2, ..base },
            LipschitzInputs { l_yy: 1.3, ..base },
            LipschitzInputs { l_yx: 0.3, ..base },
            LipschitzInputs { l_yu: 0.1, ..base },
        ] {
            assert!(beta_t_analytic(&bump, 5).unwrap().1 >= b0);
        }
    }

    #[test]
    fn geometric_sum_branches_agree() {
        let direct: f64 = (0..7).map(|t| 1.0_f64.powi(t)).sum();
        assert_eq!(geometric_sum(1.0, 7), direct);
        let direct: f64 = (0..7).map(|t| 1.3_f64.powi(t)).sum();
        assert_relative_eq!(geometric_sum(1.3, 7), direct, epsilon = 1e-12);
    }

    fn linear_scene(c: f64) -> Scene<SingleIntegrator, LinearEnv> {
        Scene {
            ego: SingleIntegrator::new(0.1).unwrap(),
            env: LinearEnv { a: 1.0, b: 0.0, c, noise_std: 0.0 },
            x0: State::xy(0.0, 0.0),
            y0: State::xy(1.0, 1.0),
        }
    }

    #[test]
    fn empirical_matches_linear_oracle() {
        // y_{t+1} = y_t + c u_t: a constant direction gives exactly T |c|.
        for &c in &[0.3, -0.7, 1.5] {
            let scene = linear_scene(c);
            let pi = Policy::constant(5, State::xy(0.4, -0.2));
            let dpi = Policy::constant(5, State::xy(0.0, 0.1));
            let ratio = beta_t_ratio(&scene, &pi, &dpi, &NoiseSequence::zeros(5, 2)).unwrap();
            let lips = LipschitzInputs { l_xx: 1.0, l_xu: 0.1, l_yy: 1.0, l_yx: 0.0, l_yu: c.abs() };
            let (_, beta) = beta_t_analytic(&lips, 5).unwrap();
            assert_relative_eq!(ratio, 5.0 * c.abs(), epsilon = 1e-12);
            assert_relative_eq!(beta, 5.0 * c.abs(), epsilon = 1e-12);
            let est = beta_t_empirical(&scene, &pi, &ProbeConfig { magnitude: 0.1, n_probe: 16 }, 3, 0).unwrap();
            assert!(est <= beta + 1e-12);
        }
    }

    #[test]
    fn decoupled_environment_has_zero_beta() {
        let scene = Scene {
            ego: SingleIntegrator::new(0.1).unwrap(),
            env: PedestrianModel {
                v0: [-0.5, 0.0],
                v_max: 0.0,
                ell_c: 1.0,
                sigma: 0.05,
                dt: 0.1,
                noise_scaling: Default::default(),
            },
            x0: State::xy(0.0, 0.5),
            y0: State::xy(3.0, 1.5),
        };
        let pi = Policy::constant(5, State::xy(2.0, 0.0));
        let est = beta_t_empirical(&scene, &pi, &ProbeConfig { magnitude: 0.1, n_probe: 8 }, 1, 0).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn zero_perturbation_rejected() {
        let scene = linear_scene(1.0);
        let pi = Policy::zeros(3, 2);
        assert!(matches!(
            beta_t_ratio(&scene, &pi, &Policy::zeros(3, 2), &NoiseSequence::zeros(3, 2)),
            Err(Error::ZeroPerturbation)
        ));
        assert!(matches!(
            beta_t_empirical(&scene, &pi, &ProbeConfig { magnitude: 0.0, n_probe: 3 }, 0, 0),
            Err(Error::ZeroPerturbation)
        ));
    }

    #[test]
    fn empirical_below_certified_bound_random_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let a = rng.random_range(-1.2..1.2);
            let b = rng.random_range(-0.5..0.5);
            let c = rng.random_range(-0.5..0.5);
            let scene = Scene {
                ego: SingleIntegrator::new(0.1).unwrap(),
                env: LinearEnv { a, b, c, noise_std: 0.02 },
                x0: State::xy(0.0, 0.0),
                y0: State::xy(1.0, -1.0),
            };
            let pi = Policy::constant(6, State::xy(rng.random_range(-1.0..1.0), 0.5));
            let lips = LipschitzInputs { l_xx: 1.0, l_xu: 0.1, l_yy: a.abs(), l_yx: b.abs(), l_yu: c.abs() };
            let (_, beta) = beta_t_analytic(&lips, 6).unwrap();
            let est = beta_t_empirical(&scene, &pi, &ProbeConfig { magnitude: 0.05, n_probe: 8 }, 9, 1).unwrap();
            assert!(est <= beta + 1e-10, "est {est} > bound {beta}");
        }
    }

    #[test]
    fn kappa_markers() {
        assert_eq!(kappa(0.0, 3.0).unwrap().value, 0.0);
        let g = kappa(0.5, 0.5).unwrap();
        assert_eq!(g.value, 0.25);
        assert!(g.update_valid && g.contraction);
        let g = kappa(2.0, 1.0).unwrap();
        assert_eq!(g.value, 2.0);
        assert!(!g.update_valid && !g.contraction);
        assert!(kappa(-1.0, 1.0).is_err());
    }

    fn ped_cfg(horizon: usize) -> PlannerConfig {
        PlannerConfig {
            x_goal: State::xy(6.0, 0.5),
            w_goal: 1.0,
            w_track: 1e-4,
            d_min: 0.8,
            u_max: 2.0,
            horizon,
            dt: 0.1,
            tolerances: SolverTolerances::default(),
        }
    }

    #[test]
    fn l_u_zero_when_constraint_inactive() {
        let planner = Planner::new(ped_cfg(5)).unwrap();
        let far = crate::dynamics::Trajectory::new(
            vec![State::xy(50.0, 50.0); 6],
            crate::dynamics::TrajectoryKind::Predicted,
        );
        let x0 = State::xy(0.0, 0.5);
        let ctx = PlannerContext { planner: &planner, y_hat: &far, x0: &x0 };
        let l_u = l_u_empirical(&ctx, 0.3, 0.01, &Policy::zeros(5, 2)).unwrap();
        assert!(l_u < 1e-9, "L_U = {l_u}");
    }

    #[test]
    fn l_u_one_step_oracle() {
        // T = 1, w_track = 0: x_1 sits on the circle of radius d_min + r
        // toward the goal, so d pi / d r = e / dt and L_U = 1 / dt.
        let cfg = PlannerConfig {
            x_goal: State::xy(1.0, 0.0),
            w_goal: 1.0,
            w_track: 0.0,
            d_min: 0.5,
            u_max: 10.0,
            horizon: 1,
            dt: 0.1,
            tolerances: SolverTolerances::default(),
        };
        let planner = Planner::new(cfg).unwrap();
        let y_hat = crate::dynamics::Trajectory::new(
            vec![State::xy(5.0, 5.0), State::xy(1.0, 0.3)],
            crate::dynamics::TrajectoryKind::Predicted,
        );
        let x0 = State::xy(0.9, -0.2);
        let ctx = PlannerContext { planner: &planner, y_hat: &y_hat, x0: &x0 };
        let l_u = l_u_empirical(&ctx, 0.2, 0.01, &Policy::zeros(1, 2)).unwrap();
        assert_relative_eq!(l_u, 10.0, epsilon = 1e-3);
        let half = l_u_empirical(&ctx, 0.2, 0.005, &Policy::zeros(1, 2)).unwrap();
        assert_relative_eq!(l_u, half, epsilon = 1e-3);
    }

    #[test]
    fn l_u_argument_checks() {
        let planner = Planner::new(ped_cfg(5)).unwrap();
        let far = crate::dynamics::Trajectory::new(
            vec![State::xy(50.0, 50.0); 6],
            crate::dynamics::TrajectoryKind::Predicted,
        );
        let x0 = State::xy(0.0, 0.5);
        let ctx = PlannerContext { planner: &planner, y_hat: &far, x0: &x0 };
        assert!(matches!(l_u_empirical(&ctx, 0.3, 0.0, &Policy::zeros(5, 2)), Err(Error::ZeroPerturbation)));
        assert!(l_u_empirical(&ctx, 0.005, 0.01, &Policy::zeros(5, 2)).is_err());
        // tube swallowing x0 at r + h
        let near = crate::dynamics::Trajectory::new(
            vec![State::xy(1.0, 0.5); 6],
            crate::dynamics::TrajectoryKind::Predicted,
        );
        let ctx = PlannerContext { planner: &planner, y_hat: &near, x0: &x0 };
        assert!(matches!(
            l_u_empirical(&ctx, 0.2, 0.01, &Policy::zeros(5, 2)),
            Err(Error::SensitivityUnavailable(_))
        ));
    }
}
