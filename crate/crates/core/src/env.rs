//! Configurable point-mass environments with explicit domain factors.
//!
//! A 2-D double integrator with damping: each step the executed action is
//! `gain * action + noise`, velocity is damped and accelerated, and position
//! advances by `horizon_scale * dt * velocity + dt * wind`. The four factors
//! (wind, action noise, embodiment gain, horizon scale) each produce
//! behaviorally distinct domains over one shared 6-D observation space.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DT: f64 = 0.1;
pub const DAMPING: f64 = 0.95;
pub const OBS_DIM: usize = 6;
pub const ACT_DIM: usize = 2;

/// Half-width of the square start region around the origin.
pub const START_REGION: f64 = 0.1;

/// Documented disparity magnitudes, indexed low / medium / high.
pub const WIND_MAGNITUDES: [f64; 3] = [0.05, 0.15, 0.30];
pub const NOISE_SIGMAS: [f64; 3] = [0.05, 0.15, 0.30];
pub const EMBODIMENT_SCALES: [f64; 3] = [1.25, 1.60, 2.00];
pub const EMBODIMENT_ANGLES_DEG: [f64; 3] = [10.0, 25.0, 40.0];
pub const HORIZON_SCALES: [f64; 3] = [1.30, 1.70, 2.20];

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

fn norm2(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn mat_apply(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

fn mat_det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn mat_inv(m: &Mat2) -> Mat2 {
    let d = mat_det(m);
    [
        [m[1][1] / d, -m[0][1] / d],
        [-m[1][0] / d, m[0][0] / d],
    ]
}

pub const IDENTITY_GAIN: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisparityLevel {
    Source,
    Low,
    Medium,
    High,
}

impl DisparityLevel {
    pub fn index(self) -> Option<usize> {
        match self {
            DisparityLevel::Source => None,
            DisparityLevel::Low => Some(0),
            DisparityLevel::Medium => Some(1),
            DisparityLevel::High => Some(2),
        }
    }
}

impl std::fmt::Display for DisparityLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DisparityLevel::Source => "source",
            DisparityLevel::Low => "low",
            DisparityLevel::Medium => "medium",
            DisparityLevel::High => "high",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainFactor {
    Noise,
    Wind,
    Embodiment,
    Horizon,
}

impl std::fmt::Display for DomainFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DomainFactor::Noise => "noise",
            DomainFactor::Wind => "wind",
            DomainFactor::Embodiment => "embodiment",
            DomainFactor::Horizon => "horizon",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for DomainFactor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(DomainFactor::Noise),
            "wind" => Ok(DomainFactor::Wind),
            "embodiment" => Ok(DomainFactor::Embodiment),
            "horizon" => Ok(DomainFactor::Horizon),
            other => Err(Error::invalid(format!("unknown domain factor '{other}'"))),
        }
    }
}

impl std::str::FromStr for DisparityLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DisparityLevel::Source),
            "low" => Ok(DisparityLevel::Low),
            "medium" => Ok(DisparityLevel::Medium),
            "high" => Ok(DisparityLevel::High),
            other => Err(Error::invalid(format!("unknown disparity level '{other}'"))),
        }
    }
}

/// Ground-truth domain factors applied by the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub wind: Vec2,
    pub action_noise_sigma: f64,
    pub embodiment_gain: Mat2,
    pub horizon_scale: f64,
    pub disparity_level: DisparityLevel,
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            wind: [0.0, 0.0],
            action_noise_sigma: 0.0,
            embodiment_gain: IDENTITY_GAIN,
            horizon_scale: 1.0,
            disparity_level: DisparityLevel::Source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_noise_sigma < 0.0 {
            return Err(Error::invalid("action_noise_sigma must be non-negative"));
        }
        if self.horizon_scale <= 0.0 {
            return Err(Error::invalid("horizon_scale must be positive"));
        }
        if mat_det(&self.embodiment_gain).abs() <= 1e-6 {
            return Err(Error::invalid("embodiment_gain must be invertible"));
        }
        if !self.wind.iter().all(|w| w.is_finite()) {
            return Err(Error::invalid("wind must be finite"));
        }
        if self.disparity_level == DisparityLevel::Source {
            let is_source = self.wind == [0.0, 0.0]
                && self.action_noise_sigma == 0.0
                && self.embodiment_gain == IDENTITY_GAIN
                && self.horizon_scale == 1.0;
            if !is_source {
                return Err(Error::invalid(
                    "disparity_level=source requires all factors at source values",
                ));
            }
        }
        Ok(())
    }

    /// Scalar magnitude of this domain's perturbation away from source,
    /// used by the disparity monotonicity property.
    pub fn perturbation_magnitude(&self) -> f64 {
        let wind = norm2(self.wind);
        let noise = self.action_noise_sigma;
        let mut gain = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let d = self.embodiment_gain[i][j] - IDENTITY_GAIN[i][j];
                gain += d * d;
            }
        }
        let horizon = (self.horizon_scale - 1.0).abs();
        wind + noise + gain.sqrt() + horizon
    }
}

/// An ordered sequence of waypoints to visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub waypoints: Vec<Vec2>,
    pub goal_tolerance: f64,
    pub max_steps: usize,
}

impl TaskSpec {
    pub fn new(waypoints: Vec<Vec2>, goal_tolerance: f64, max_steps: usize) -> Self {
        TaskSpec {
            waypoints,
            goal_tolerance,
            max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::invalid("task needs at least one waypoint"));
        }
        if self.goal_tolerance <= 0.0 {
            return Err(Error::invalid("goal_tolerance must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        Ok(())
    }

    /// Summed Euclidean distance between waypoint lists, padding the shorter
    /// list with its last waypoint. Used for task substitution.
    pub fn waypoint_distance(&self, other: &TaskSpec) -> f64 {
        let n = self.waypoints.len().max(other.waypoints.len());
        let mut total = 0.0;
        for i in 0..n {
            let a = self.waypoints[i.min(self.waypoints.len() - 1)];
            let b = other.waypoints[i.min(other.waypoints.len() - 1)];
            total += norm2([a[0] - b[0], a[1] - b[1]]);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub waypoint_index: usize,
    pub step_count: usize,
}

impl EnvState {
    pub fn done(&self, task: &TaskSpec) -> bool {
        self.waypoint_index >= task.waypoints.len() || self.step_count >= task.max_steps
    }

    /// Fixed 6-D observation: position, velocity, vector to current waypoint.
    pub fn observation(&self, task: &TaskSpec) -> [f64; OBS_DIM] {
        let wi = self.waypoint_index.min(task.waypoints.len() - 1);
        let wp = task.waypoints[wi];
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            wp[0] - self.position[0],
            wp[1] - self.position[1],
        ]
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// One flag per waypoint, true once that waypoint has been reached.
    pub subtask_success: Vec<bool>,
}

pub fn reset(task: &TaskSpec, domain: &DomainSpec, seed: u64) -> Result<EnvState> {
    task.validate()?;
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let position = [
        rng.random_range(-START_REGION..START_REGION),
        rng.random_range(-START_REGION..START_REGION),
    ];
    Ok(EnvState {
        position,
        velocity: [0.0, 0.0],
        waypoint_index: 0,
        step_count: 0,
    })
}

/// Advance the dynamics by one step. `rng` drives the action noise only.
pub fn step(
    task: &TaskSpec,
    domain: &DomainSpec,
    state: &EnvState,
    action: Vec2,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    if state.done(task) {
        return Err(Error::usage("step called on a finished episode"));
    }
    let clipped = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let mut executed = mat_apply(&domain.embodiment_gain, clipped);
    if domain.action_noise_sigma > 0.0 {
        executed[0] += domain.action_noise_sigma * rng.sample::<f64, _>(StandardNormal);
        executed[1] += domain.action_noise_sigma * rng.sample::<f64, _>(StandardNormal);
    }

    let velocity = [
        DAMPING * state.velocity[0] + executed[0],
        DAMPING * state.velocity[1] + executed[1],
    ];
    let position = [
        state.position[0] + domain.horizon_scale * DT * velocity[0] + DT * domain.wind[0],
        state.position[1] + domain.horizon_scale * DT * velocity[1] + DT * domain.wind[1],
    ];

    let mut waypoint_index = state.waypoint_index;
    let mut bonus = 0.0;
    while waypoint_index < task.waypoints.len() {
        let wp = task.waypoints[waypoint_index];
        let d = norm2([wp[0] - position[0], wp[1] - position[1]]);
        if d <= task.goal_tolerance {
            waypoint_index += 1;
            bonus += 1.0;
        } else {
            break;
        }
    }

    let dist = if waypoint_index < task.waypoints.len() {
        let wp = task.waypoints[waypoint_index];
        norm2([wp[0] - position[0], wp[1] - position[1]])
    } else {
        0.0
    };
    let reward = bonus - dist;

    let next = EnvState {
        position,
        velocity,
        waypoint_index,
        step_count: state.step_count + 1,
    };
    let done = next.done(task);
    let subtask_success = (0..task.waypoints.len())
        .map(|i| i < waypoint_index)
        .collect();

    Ok(StepOutcome {
        state: next,
        reward,
        done,
        subtask_success,
    })
}

/// Proportional controller toward the current waypoint, pre-compensated for
/// the domain: wind drift is cancelled, the embodiment gain inverted, and the
/// approach speed rescaled by the horizon factor.
pub fn scripted_expert(task: &TaskSpec, domain: &DomainSpec, state: &EnvState) -> Result<Vec2> {
    if state.done(task) {
        return Err(Error::usage("expert queried on a finished episode"));
    }
    Ok(expert_action_unclipped(task, domain, state).map(|a| a.clamp(-1.0, 1.0)))
}

/// Expert control law before the [-1, 1] clip; exposed for gain-compensation
/// tests and internal use.
pub fn expert_action_unclipped(task: &TaskSpec, domain: &DomainSpec, state: &EnvState) -> Vec2 {
    const KP: f64 = 4.0;
    const VMAX: f64 = 1.2;

    // Target the first not-yet-reached waypoint outside tolerance.
    let mut wi = state.waypoint_index.min(task.waypoints.len() - 1);
    while wi + 1 < task.waypoints.len() {
        let wp = task.waypoints[wi];
        let d = norm2([wp[0] - state.position[0], wp[1] - state.position[1]]);
        if d <= task.goal_tolerance {
            wi += 1;
        } else {
            break;
        }
    }
    let wp = task.waypoints[wi];
    let to_wp = [wp[0] - state.position[0], wp[1] - state.position[1]];
    let dist = norm2(to_wp);

    let h = domain.horizon_scale;
    let speed = (KP * dist).min(VMAX);
    let dir = if dist > 1e-9 {
        [to_wp[0] / dist, to_wp[1] / dist]
    } else {
        [0.0, 0.0]
    };
    // Desired post-step velocity: approach speed (divided by h so the
    // position step is horizon-invariant) plus wind cancellation.
    let v_des = [
        dir[0] * speed / h - domain.wind[0] / h,
        dir[1] * speed / h - domain.wind[1] / h,
    ];
    let u = [
        v_des[0] - DAMPING * state.velocity[0],
        v_des[1] - DAMPING * state.velocity[1],
    ];
    mat_apply(&mat_inv(&domain.embodiment_gain), u)
}

/// Deterministic single-factor domain construction. The named factor takes
/// its documented magnitude for the disparity level; direction-valued factors
/// (wind, embodiment rotation) draw their orientation from the seed.
pub fn make_domain(factor: DomainFactor, disparity: DisparityLevel, seed: u64) -> DomainSpec {
    let Some(idx) = disparity.index() else {
        return DomainSpec::source();
    };
    let mut spec = DomainSpec::source();
    spec.disparity_level = disparity;
    let mut rng = rng::rng_for(seed, &format!("domain/{factor}/{disparity}"));
    match factor {
        DomainFactor::Wind => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = WIND_MAGNITUDES[idx];
            spec.wind = [mag * angle.cos(), mag * angle.sin()];
        }
        DomainFactor::Noise => {
            spec.action_noise_sigma = NOISE_SIGMAS[idx];
        }
        DomainFactor::Embodiment => {
            let scale = EMBODIMENT_SCALES[idx];
            let sign = if rng.random_range(0..2u32) == 0 {
                1.0
            } else {
                -1.0
            };
            let angle = sign * EMBODIMENT_ANGLES_DEG[idx].to_radians();
            let (s, c) = angle.sin_cos();
            spec.embodiment_gain = [[scale * c, -scale * s], [scale * s, scale * c]];
        }
        DomainFactor::Horizon => {
            spec.horizon_scale = HORIZON_SCALES[idx];
        }
    }
    spec
}

/// `make_domain` with the factor magnitude scaled by `magnitude_scale`,
/// producing off-grid training domains whose parameters differ from every
/// evaluation target.
pub fn make_domain_scaled(
    factor: DomainFactor,
    disparity: DisparityLevel,
    seed: u64,
    magnitude_scale: f64,
) -> DomainSpec {
    let mut spec = make_domain(factor, disparity, seed);
    match factor {
        DomainFactor::Wind => {
            spec.wind = [spec.wind[0] * magnitude_scale, spec.wind[1] * magnitude_scale];
        }
        DomainFactor::Noise => {
            spec.action_noise_sigma *= magnitude_scale;
        }
        DomainFactor::Embodiment => {
            let idx = disparity.index().unwrap_or(0);
            let base_scale = EMBODIMENT_SCALES[idx];
            let scale = 1.0 + (base_scale - 1.0) * magnitude_scale;
            let base = spec.embodiment_gain;
            let base_angle = (base[1][0] / base_scale).atan2(base[0][0] / base_scale);
            let angle = base_angle * magnitude_scale;
            let (s, c) = angle.sin_cos();
            spec.embodiment_gain = [[scale * c, -scale * s], [scale * s, scale * c]];
        }
        DomainFactor::Horizon => {
            spec.horizon_scale = 1.0 + (spec.horizon_scale - 1.0) * magnitude_scale;
        }
    }
    spec
}

/// Stateful convenience wrapper owning the task, domain, state and noise rng.
pub struct ToyEnv {
    pub task: TaskSpec,
    pub domain: DomainSpec,
    state: Option<EnvState>,
    noise_rng: ChaCha8Rng,
}

impl ToyEnv {
    pub fn new(task: TaskSpec, domain: DomainSpec) -> Result<Self> {
        task.validate()?;
        domain.validate()?;
        Ok(ToyEnv {
            task,
            domain,
            state: None,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn reset(&mut self, seed: u64) -> Result<EnvState> {
        let s = reset(&self.task, &self.domain, seed)?;
        self.noise_rng = rng::rng_for(seed, "env/noise");
        self.state = Some(s.clone());
        Ok(s)
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        match &self.state {
            Some(s) => s.done(&self.task),
            None => true,
        }
    }

    pub fn step(&mut self, action: Vec2) -> Result<StepOutcome> {
        let state = self
            .state
            .clone()
            .ok_or_else(|| Error::usage("step before reset"))?;
        let out = step(&self.task, &self.domain, &state, action, &mut self.noise_rng)?;
        self.state = Some(out.state.clone());
        Ok(out)
    }

    pub fn observation(&self) -> Option<[f64; OBS_DIM]> {
        self.state.as_ref().map(|s| s.observation(&self.task))
    }
}

/// Outcome of one scripted-expert episode.
#[derive(Debug, Clone)]
pub struct ExpertEpisode {
    pub observations: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<Vec2>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub episode_return: f64,
}

/// Roll the scripted expert through one episode.
pub fn run_expert_episode(
    task: &TaskSpec,
    domain: &DomainSpec,
    seed: u64,
) -> Result<ExpertEpisode> {
    let mut env = ToyEnv::new(task.clone(), domain.clone())?;
    let mut state = env.reset(seed)?;
    let mut observations = vec![state.observation(task)];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let a = scripted_expert(task, domain, &state)?;
        let out = env.step(a)?;
        actions.push(a);
        rewards.push(out.reward);
        state = out.state;
        observations.push(state.observation(task));
        if out.done {
            success = out.subtask_success.iter().all(|&b| b);
        }
    }
    let episode_return = rewards.iter().sum();
    Ok(ExpertEpisode {
        observations,
        actions,
        rewards,
        success,
        episode_return,
    })
}

/// Expert success rate over `episodes` seeded episodes.
pub fn expert_success_rate(
    task: &TaskSpec,
    domain: &DomainSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut ok = 0usize;
    for e in 0..episodes {
        let ep = run_expert_episode(task, domain, rng::subseed(seed, &format!("expert-val/{e}")))?;
        if ep.success {
            ok += 1;
        }
    }
    Ok(ok as f64 / episodes as f64)
}
