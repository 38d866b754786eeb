//! Coupled ego/environment dynamics, the pedestrian interaction model,
//! seeded rollouts and the nominal constant-velocity predictor.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::SeedKey;

/// A point in R^d. Used for ego states, environment states and controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

/// Controls share the vector representation of states.
pub type Control = State;

impl State {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Self(vec![x, y])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    /// Euclidean distance; panics in debug builds on dimension mismatch.
    pub fn dist(&self, other: &State) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &State) -> State {
        State(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &State) -> State {
        State(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self + scale * other`
    pub fn axpy(&self, scale: f64, other: &State) -> State {
        State(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> State {
        State(self.0.iter().map(|a| a * s).collect())
    }

    fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// Open-loop control sequence `u_0 .. u_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub controls: Vec<Control>,
}

impl Policy {
    pub fn new(controls: Vec<Control>) -> Result<Self> {
        if let Some(first) = controls.first() {
            let d = first.dim();
            for u in &controls {
                u.check_dim(d)?;
                if !u.is_finite() {
                    return Err(Error::NonFinite("policy"));
                }
            }
        }
        Ok(Self { controls })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            controls: vec![State::zeros(dim); horizon],
        }
    }

    /// Every step uses the same control.
    pub fn constant(horizon: usize, u: Control) -> Self {
        Self {
            controls: vec![u; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, State::dim)
    }

    /// `max_t ||u_t - u'_t||_2`
    pub fn dist_inf(&self, other: &Policy) -> Result<f64> {
        if self.horizon() != other.horizon() {
            return Err(Error::LengthMismatch {
                expected: self.horizon(),
                got: other.horizon(),
            });
        }
        Ok(self
            .controls
            .iter()
            .zip(&other.controls)
            .map(|(a, b)| a.dist(b))
            .fold(0.0, f64::max))
    }

    /// `max_t ||u_t||_2`
    pub fn norm_inf(&self) -> f64 {
        self.controls.iter().map(State::norm).fold(0.0, f64::max)
    }

    pub fn within_bounds(&self, u_max: f64) -> bool {
        self.controls.iter().all(|u| u.max_abs() <= u_max)
    }

    pub fn add(&self, other: &Policy) -> Policy {
        Policy {
            controls: self
                .controls
                .iter()
                .zip(&other.controls)
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Policy) -> Policy {
        Policy {
            controls: self
                .controls
                .iter()
                .zip(&other.controls)
                .map(|(a, b)| a.sub(b))
                .collect(),
        }
    }

    /// Flattened row-major controls.
    pub fn to_flat(&self) -> Vec<f64> {
        self.controls.iter().flat_map(|u| u.0.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], dim: usize) -> Self {
        Self {
            controls: flat.chunks(dim).map(|c| State(c.to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Ego,
    Environment,
    Predicted,
}

/// State sequence over `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub kind: TrajectoryKind,
}

impl Trajectory {
    pub fn new(states: Vec<State>, kind: TrajectoryKind) -> Self {
        Self { states, kind }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `T`, the number of transitions.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// `max_t ||a_t - b_t||_2` over two equal-length trajectories.
    pub fn dist_inf(&self, other: &Trajectory) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| a.dist(b))
            .fold(0.0, f64::max))
    }
}

/// Exogenous noise draws `w_0 .. w_{T-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSequence {
    pub draws: Vec<State>,
    pub seed: Option<SeedKey>,
}

impl NoiseSequence {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            draws: vec![State::zeros(dim); horizon],
            seed: None,
        }
    }

    /// i.i.d. `N(0, std^2 I)` draws from the stream identified by `key`.
    pub fn gaussian(key: SeedKey, horizon: usize, dim: usize, std: f64) -> Self {
        let mut rng = key.rng();
        let draws = (0..horizon)
            .map(|_| {
                State(
                    (0..dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            std * z
                        })
                        .collect(),
                )
            })
            .collect();
        Self {
            draws,
            seed: Some(key),
        }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Ego transition `x_{t+1} = f_X(x_t, u_t)`.
pub trait EgoDynamics: Sync {
    fn step(&self, x: &State, u: &Control) -> Result<State>;
}

/// Environment transition `y_{t+1} = f_Y(y_t, x_t, u_t, w_t)`.
pub trait EnvDynamics: Sync {
    fn step(&self, y: &State, x: &State, u: &Control, w: &State) -> Result<State>;

    /// Standard deviation of each noise component per step.
    fn noise_std(&self) -> f64;
}

/// `x_{t+1} = x_t + dt * u_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleIntegrator {
    pub dt: f64,
}

impl SingleIntegrator {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("sampling time must be positive, got {dt}")));
        }
        Ok(Self { dt })
    }
}

impl EgoDynamics for SingleIntegrator {
    fn step(&self, x: &State, u: &Control) -> Result<State> {
        u.check_dim(x.dim())?;
        Ok(x.axpy(self.dt, u))
    }
}

/// How the per-step noise standard deviation is derived from `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    /// Covariance `dt * sigma^2 I`, i.e. std `sigma * sqrt(dt)`.
    #[default]
    SqrtDt,
    /// std `sigma * dt`.
    Dt,
}

/// Pedestrian drifting at `v0` and fleeing from the ego car with speed
/// `phi(rho) = v_max * ell_c^2 / (rho^2 + ell_c^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianModel {
    pub v0: [f64; 2],
    pub v_max: f64,
    pub ell_c: f64,
    pub sigma: f64,
    pub dt: f64,
    #[serde(default)]
    pub noise_scaling: NoiseScaling,
}

impl PedestrianModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v_max >= 0.0
            && self.ell_c > 0.0
            && self.sigma >= 0.0
            && self.dt > 0.0
            && self.v0.iter().all(|v| v.is_finite())
            && self.v_max.is_finite()
            && self.ell_c.is_finite()
            && self.sigma.is_finite()
            && self.dt.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pedestrian model {self:?}")))
        }
    }

    /// Repulsion speed at distance `rho`.
    pub fn phi(&self, rho: f64) -> f64 {
        let l2 = self.ell_c * self.ell_c;
        self.v_max * l2 / (rho * rho + l2)
    }

    pub fn nominal_velocity(&self) -> State {
        State(self.v0.to_vec())
    }

    /// Globally valid Lipschitz constants `(L_Yy, L_Yx, L_Yu)` of the
    /// transition. The repulsion field `g(r) = phi(|r|) r/|r|` has Jacobian
    /// eigenvalues `v_max l^2 (l^2 - rho^2)/(rho^2 + l^2)^2` (radial) and
    /// `v_max l^2/(rho^2 + l^2)` (tangential), both bounded by `v_max` in
    /// magnitude.
    pub fn lipschitz_constants(&self) -> (f64, f64, f64) {
        let lg = self.v_max;
        (1.0 + self.dt * lg, self.dt * lg, 0.0)
    }
}

impl EnvDynamics for PedestrianModel {
    fn step(&self, y: &State, x: &State, _u: &Control, w: &State) -> Result<State> {
        y.check_dim(2)?;
        x.check_dim(2)?;
        w.check_dim(2)?;
        let rel = y.sub(x);
        let rho = rel.norm();
        if rho == 0.0 {
            return Err(Error::DegenerateGeometry { step: 0 });
        }
        let flee = self.phi(rho) / rho;
        Ok(State(vec![
            y.0[0] + self.dt * (self.v0[0] + flee * rel.0[0]) + w.0[0],
            y.0[1] + self.dt * (self.v0[1] + flee * rel.0[1]) + w.0[1],
        ]))
    }

    fn noise_std(&self) -> f64 {
        match self.noise_scaling {
            NoiseScaling::SqrtDt => self.sigma * self.dt.sqrt(),
            NoiseScaling::Dt => self.sigma * self.dt,
        }
    }
}

/// `y_{t+1} = a y_t + b x_t + c u_t + w_t` with scalar gains on each
/// component. Its Lipschitz constants are exactly `(|a|, |b|, |c|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearEnv {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub noise_std: f64,
}

impl EnvDynamics for LinearEnv {
    fn step(&self, y: &State, x: &State, u: &Control, w: &State) -> Result<State> {
        x.check_dim(y.dim())?;
        u.check_dim(y.dim())?;
        w.check_dim(y.dim())?;
        Ok(State(
            (0..y.dim())
                .map(|i| self.a * y.0[i] + self.b * x.0[i] + self.c * u.0[i] + w.0[i])
                .collect(),
        ))
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

pub fn step_ego(ego: &impl EgoDynamics, x: &State, u: &Control) -> Result<State> {
    ego.step(x, u)
}

pub fn step_pedestrian(model: &PedestrianModel, y: &State, x: &State, w: &State) -> Result<State> {
    model.step(y, x, &State::zeros(2), w)
}

/// Simulate both agents under an open-loop policy. Deterministic in its
/// inputs.
pub fn rollout<E, V>(
    ego: &E,
    env: &V,
    policy: &Policy,
    x0: &State,
    y0: &State,
    noise: &NoiseSequence,
) -> Result<(Trajectory, Trajectory)>
where
    E: EgoDynamics + ?Sized,
    V: EnvDynamics + ?Sized,
{
    if noise.len() != policy.horizon() {
        return Err(Error::LengthMismatch {
            expected: policy.horizon(),
            got: noise.len(),
        });
    }
    let horizon = policy.horizon();
    let mut xs = Vec::with_capacity(horizon + 1);
    let mut ys = Vec::with_capacity(horizon + 1);
    xs.push(x0.clone());
    ys.push(y0.clone());
    for (t, (u, w)) in policy.controls.iter().zip(&noise.draws).enumerate() {
        let x = &xs[t];
        let y = &ys[t];
        let y_next = env.step(y, x, u, w).map_err(|e| match e {
            Error::DegenerateGeometry { .. } => Error::DegenerateGeometry { step: t },
            other => other,
        })?;
        let x_next = ego.step(x, u)?;
        xs.push(x_next);
        ys.push(y_next);
    }
    Ok((
        Trajectory::new(xs, TrajectoryKind::Ego),
        Trajectory::new(ys, TrajectoryKind::Environment),
    ))
}

/// Fixed ego/environment pair with initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<E, V> {
    pub ego: E,
    pub env: V,
    pub x0: State,
    pub y0: State,
}

impl<E: EgoDynamics, V: EnvDynamics> Scene<E, V> {
    pub fn rollout(&self, policy: &Policy, noise: &NoiseSequence) -> Result<(Trajectory, Trajectory)> {
        rollout(&self.ego, &self.env, policy, &self.x0, &self.y0, noise)
    }

    pub fn noise(&self, key: SeedKey, horizon: usize) -> NoiseSequence {
        NoiseSequence::gaussian(key, horizon, self.y0.dim(), self.env.noise_std())
    }
}

/// Ego trajectory only; the single integrator ignores the environment.
pub fn simulate_ego<E: EgoDynamics + ?Sized>(ego: &E, policy: &Policy, x0: &State) -> Result<Trajectory> {
    let mut xs = Vec::with_capacity(policy.horizon() + 1);
    xs.push(x0.clone());
    for u in &policy.controls {
        let next = ego.step(xs.last().expect("nonempty"), u)?;
        xs.push(next);
    }
    Ok(Trajectory::new(xs, TrajectoryKind::Ego))
}

/// Constant-velocity prediction `y_hat_t = y0 + t * dt * v0`, built by
/// repeated addition.
pub fn predict_nominal(y0: &State, model: &PedestrianModel, horizon: usize) -> Trajectory {
    let v = model.nominal_velocity();
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(y0.clone());
    for t in 0..horizon {
        let next = states[t].axpy(model.dt, &v);
        states.push(next);
    }
    Trajectory::new(states, TrajectoryKind::Predicted)
}
