//! Desk-scale continuous-control environments and the rollout loop.
//!
//! * `point_mass_2d`: state `(px, py, vx, vy)`, observation = state,
//!   action = acceleration clipped to `[-1, 1]^2`. One step is
//!   `pos += v dt; v += a dt`, reward `-|pos' - (1, 1)|_2 - 0.01 |a|^2`.
//!   Start state uniform in `[-0.05, 0.05]^4`.
//! * `pendulum_swingup`: state `(theta, theta_dot)` with `theta = 0` upright,
//!   observation `(cos theta, sin theta, theta_dot)`, torque clipped to
//!   `[-2, 2]`. Point pendulum `g = 10, m = l = 1`:
//!   `theta_dot += (g/l sin theta + u/(m l^2)) dt` (clipped to `[-8, 8]`),
//!   `theta += theta_dot dt`, reward
//!   `-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2)` on the next state.
//!   Start `theta ~ U(-pi, pi)`, `theta_dot ~ U(-1, 1)`.
//!
//! Neither environment terminates early: `done` is set exactly at the
//! horizon.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

thread_local! {
    static ENV_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Environment transitions executed on the current thread so far.
pub fn env_step_count() -> u64 {
    ENV_STEPS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointMass2d,
    PendulumSwingup,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PointMass2d => "point_mass_2d",
            EnvName::PendulumSwingup => "pendulum_swingup",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_mass_2d" | "point_mass" => Ok(EnvName::PointMass2d),
            "pendulum_swingup" | "pendulum" => Ok(EnvName::PendulumSwingup),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub dt: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
}

pub const POINT_MASS_TARGET: [f64; 2] = [1.0, 1.0];
const PENDULUM_G: f64 = 10.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;

impl EnvSpec {
    pub fn point_mass_2d() -> Self {
        Self {
            name: EnvName::PointMass2d,
            obs_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            dt: 0.05,
            horizon: 200,
            gamma: 0.99,
            seed: 0,
        }
    }

    pub fn pendulum_swingup() -> Self {
        Self {
            name: EnvName::PendulumSwingup,
            obs_dim: 3,
            action_dim: 1,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            dt: 0.05,
            horizon: 200,
            gamma: 0.99,
            seed: 0,
        }
    }

    pub fn new(name: EnvName) -> Self {
        match name {
            EnvName::PointMass2d => Self::point_mass_2d(),
            EnvName::PendulumSwingup => Self::pendulum_swingup(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn state_dim(&self) -> usize {
        match self.name {
            EnvName::PointMass2d => 4,
            EnvName::PendulumSwingup => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = Self::new(self.name);
        check_dim("obs_dim", fixed.obs_dim, self.obs_dim)?;
        check_dim("action_dim", fixed.action_dim, self.action_dim)?;
        check_dim("action_low", self.action_dim, self.action_low.len())?;
        check_dim("action_high", self.action_dim, self.action_high.len())?;
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Invalid("action_low must be < action_high componentwise".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Invalid("dt must be positive".into()));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }

    pub fn observe(&self, physical: &[f64]) -> Vec<f64> {
        match self.name {
            EnvName::PointMass2d => physical.to_vec(),
            EnvName::PendulumSwingup => vec![physical[0].cos(), physical[0].sin(), physical[1]],
        }
    }

    /// Noise-free transition and reward; does not touch the step counter.
    /// `action` must already be clipped.
    pub fn dynamics(&self, physical: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let dt = self.dt;
        match self.name {
            EnvName::PointMass2d => {
                let (px, py, vx, vy) = (physical[0], physical[1], physical[2], physical[3]);
                let nx = px + vx * dt;
                let ny = py + vy * dt;
                let nvx = vx + action[0] * dt;
                let nvy = vy + action[1] * dt;
                let dist = ((nx - POINT_MASS_TARGET[0]).powi(2) + (ny - POINT_MASS_TARGET[1]).powi(2)).sqrt();
                let effort = action[0] * action[0] + action[1] * action[1];
                (vec![nx, ny, nvx, nvy], -dist - 0.01 * effort)
            }
            EnvName::PendulumSwingup => {
                let (th, thd) = (physical[0], physical[1]);
                let u = action[0];
                let acc = PENDULUM_G * th.sin() + u;
                let nthd = (thd + acc * dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let nth = th + nthd * dt;
                let w = wrap_angle(nth);
                (vec![nth, nthd], -(w * w + 0.1 * nthd * nthd + 0.001 * u * u))
            }
        }
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub physical: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Draw the start state for `seed`; returns the state and its observation.
pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(EnvState, Vec<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let physical = match spec.name {
        EnvName::PointMass2d => (0..4).map(|_| rng.gen_range(-0.05..=0.05)).collect(),
        EnvName::PendulumSwingup => vec![rng.gen_range(-PI..PI), rng.gen_range(-1.0..1.0)],
    };
    let obs = spec.observe(&physical);
    Ok((EnvState { physical, t: 0 }, obs))
}

/// One counted environment transition.
pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepResult> {
    check_dim("action", spec.action_dim, action.len())?;
    check_dim("state", spec.state_dim(), state.physical.len())?;
    check_finite("action", action)?;
    check_finite("state", &state.physical)?;
    ENV_STEPS.with(|c| c.set(c.get() + 1));
    let clipped = spec.clip_action(action);
    let (physical, reward) = spec.dynamics(&state.physical, &clipped);
    let t = state.t + 1;
    let next_obs = spec.observe(&physical);
    let mut info = BTreeMap::new();
    if spec.name == EnvName::PointMass2d {
        let d = ((physical[0] - POINT_MASS_TARGET[0]).powi(2) + (physical[1] - POINT_MASS_TARGET[1]).powi(2)).sqrt();
        info.insert("distance".to_string(), d);
    }
    Ok(StepResult { next_obs, next_state: EnvState { physical, t }, reward, done: t >= spec.horizon, info })
}

/// Minimal episodic MDP interface used by the trainers.
pub trait Task {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> &[f64];
    fn action_high(&self) -> &[f64];
    fn gamma(&self) -> f64;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    /// Returns `(next_obs, reward, done)`.
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)>;
}

/// An [`EnvSpec`] with its running state.
#[derive(Debug, Clone)]
pub struct EnvTask {
    pub spec: EnvSpec,
    pub state: EnvState,
}

impl EnvTask {
    pub fn new(spec: EnvSpec) -> Self {
        let state = EnvState { physical: vec![0.0; spec.state_dim()], t: 0 };
        Self { spec, state }
    }
}

impl Task for EnvTask {
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }
    fn action_low(&self) -> &[f64] {
        &self.spec.action_low
    }
    fn action_high(&self) -> &[f64] {
        &self.spec.action_high
    }
    fn gamma(&self) -> f64 {
        self.spec.gamma
    }
    fn horizon(&self) -> usize {
        self.spec.horizon
    }
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let (state, obs) = reset(&self.spec, seed)?;
        self.state = state;
        Ok(obs)
    }
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        let r = step(&self.spec, &self.state, action)?;
        self.state = r.next_state;
        Ok((r.next_obs, r.reward, r.done))
    }
}

/// Anything that maps an observation to an action during a rollout.
pub trait PolicyAdapter {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Called at the start of every episode.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

impl<P: PolicyAdapter + ?Sized> PolicyAdapter for &mut P {
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn reset(&mut self) {
        (**self).reset()
    }
    fn act(&mut self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        (**self).act(obs, rng)
    }
}

/// Uniformly random actions within bounds.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub obs_dim: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl RandomPolicy {
    pub fn for_spec(spec: &EnvSpec) -> Self {
        Self { obs_dim: spec.obs_dim, low: spec.action_low.clone(), high: spec.action_high.clone() }
    }
}

impl PolicyAdapter for RandomPolicy {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.low.len()
    }
    fn act(&mut self, _obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.low.iter().zip(&self.high).map(|(&l, &h)| rng.gen_range(l..h)).collect())
    }
}

/// Where a hook sits in the observe → attack → defense → act chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookStage {
    Attack,
    Defense,
}

pub struct HookContext<'a> {
    pub spec: &'a EnvSpec,
    pub state: &'a EnvState,
    pub t: usize,
    /// Ground-truth observation of the current state.
    pub clean_obs: &'a [f64],
}

/// Annotations a hook may attach to the current step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepNotes {
    pub attacked: bool,
    pub attack: Option<String>,
    pub verdict: Option<bool>,
    pub score: Option<f64>,
    pub denoised: Option<Vec<f64>>,
}

/// Observation interposer.
pub trait ObsHook {
    fn stage(&self) -> HookStage;
    fn reset(&mut self, _seed: u64) {}
    fn apply(&mut self, ctx: &HookContext<'_>, obs: Vec<f64>, notes: &mut StepNotes) -> Result<Vec<f64>>;
}

/// Passes observations through untouched.
#[derive(Debug, Clone, Copy)]
pub struct IdentityHook(pub HookStage);

impl ObsHook for IdentityHook {
    fn stage(&self) -> HookStage {
        self.0
    }
    fn apply(&mut self, _ctx: &HookContext<'_>, obs: Vec<f64>, _notes: &mut StepNotes) -> Result<Vec<f64>> {
        Ok(obs)
    }
}

/// Ordered hook chain; attack-stage hooks always run before defense-stage hooks.
#[derive(Default)]
pub struct StepHooks<'a> {
    pub hooks: Vec<Box<dyn ObsHook + 'a>>,
}

impl<'a> StepHooks<'a> {
    pub fn none() -> Self {
        Self { hooks: Vec::new() }
    }

    pub fn with(mut self, hook: impl ObsHook + 'a) -> Self {
        self.hooks.push(Box::new(hook));
        self
    }

    pub fn push(&mut self, hook: Box<dyn ObsHook + 'a>) {
        self.hooks.push(hook);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub t: usize,
    /// Ground-truth observation.
    pub obs: Vec<f64>,
    /// Observation after attack-stage hooks.
    pub perceived: Vec<f64>,
    /// Observation handed to the policy after defense-stage hooks.
    pub policy_input: Vec<f64>,
    /// Clipped action actually applied.
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub attacked: bool,
    pub attack: Option<String>,
    pub verdict: Option<bool>,
    pub score: Option<f64>,
    pub denoised: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env: EnvName,
    pub seed: u64,
    pub gamma: f64,
    pub steps: Vec<TrajStep>,
    /// `sum_t gamma^t r_t`.
    pub discounted_return: f64,
}

impl Trajectory {
    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn attack_frequency(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.attacked).count() as f64 / self.steps.len() as f64
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut w = 1.0;
    for r in rewards {
        total += w * r;
        w *= gamma;
    }
    total
}

/// Seed of the policy/hook stream for a rollout seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ 0x94D0_49BB_1331_11EB)
}

/// Run one full-horizon episode: observe → attack hooks → defense hooks → act.
pub fn rollout(spec: &EnvSpec, policy: &mut dyn PolicyAdapter, hooks: &mut StepHooks<'_>, seed: u64) -> Result<Trajectory> {
    check_dim("policy obs_dim", spec.obs_dim, policy.obs_dim())?;
    check_dim("policy action_dim", spec.action_dim, policy.action_dim())?;
    let (mut state, mut obs) = reset(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    policy.reset();
    for (i, h) in hooks.hooks.iter_mut().enumerate() {
        h.reset(stream_seed(seed, 2 + i as u64));
    }
    let mut steps = Vec::with_capacity(spec.horizon);
    let mut rewards = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let mut notes = StepNotes::default();
        let mut cur = obs.clone();
        for stage in [HookStage::Attack, HookStage::Defense] {
            for h in hooks.hooks.iter_mut().filter(|h| h.stage() == stage) {
                let ctx = HookContext { spec, state: &state, t, clean_obs: &obs };
                cur = h.apply(&ctx, cur, &mut notes)?;
                check_dim("hook output", spec.obs_dim, cur.len())?;
            }
            if stage == HookStage::Attack {
                notes.denoised = None;
                steps.push(TrajStep {
                    t,
                    obs: obs.clone(),
                    perceived: cur.clone(),
                    policy_input: Vec::new(),
                    action: Vec::new(),
                    reward: 0.0,
                    done: false,
                    attacked: false,
                    attack: None,
                    verdict: None,
                    score: None,
                    denoised: None,
                });
            }
        }
        let action = spec.clip_action(&policy.act(&cur, &mut rng)?);
        let res = step(spec, &state, &action)?;
        let rec = steps.last_mut().expect("step pushed above");
        rec.policy_input = cur;
        rec.action = action;
        rec.reward = res.reward;
        rec.done = res.done;
        rec.attacked = notes.attacked;
        rec.attack = notes.attack;
        rec.verdict = notes.verdict;
        rec.score = notes.score;
        rec.denoised = notes.denoised;
        rewards.push(res.reward);
        state = res.next_state;
        obs = res.next_obs;
    }
    Ok(Trajectory {
        env: spec.name,
        seed,
        gamma: spec.gamma,
        discounted_return: discounted_return(&rewards, spec.gamma),
        steps,
    })
}

/// Mean undiscounted return of `n` rollouts with seeds `base_seed..base_seed + n`.
pub fn mean_return(spec: &EnvSpec, policy: &mut dyn PolicyAdapter, n: usize, base_seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n {
        total += rollout(spec, policy, &mut StepHooks::none(), base_seed + i as u64)?.undiscounted_return();
    }
    Ok(total / n.max(1) as f64)
}
