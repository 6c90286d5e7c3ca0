//! Learned perturbation policy trained to minimise the victim's return.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::budget::{AttackBudget, ObsNormalizer};
use crate::env::{self, EnvSpec, EnvState, HookContext, ObsHook, PolicyAdapter, StepNotes, Task};
use crate::error::{check_dim, Result};
use crate::policy::{train_ppo_on, PolicyBundle, PpoConfig, TrainLog};

/// The environment as seen by the adversary: it observes the normalised
/// clean observation, emits a normalised perturbation in `[-eps, eps]^d`,
/// and earns the negated victim reward.
pub struct AdversaryTask<'a> {
    spec: EnvSpec,
    victim: &'a mut dyn PolicyAdapter,
    defense: Option<&'a mut dyn ObsHook>,
    norm: ObsNormalizer,
    budget: AttackBudget,
    low: Vec<f64>,
    high: Vec<f64>,
    state: EnvState,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> AdversaryTask<'a> {
    pub fn new(
        spec: &EnvSpec,
        victim: &'a mut dyn PolicyAdapter,
        defense: Option<&'a mut dyn ObsHook>,
        norm: &ObsNormalizer,
        budget: AttackBudget,
    ) -> Result<Self> {
        spec.validate()?;
        check_dim("victim obs_dim", spec.obs_dim, victim.obs_dim())?;
        check_dim("normalizer dim", spec.obs_dim, norm.dim())?;
        let d = spec.obs_dim;
        Ok(Self {
            spec: spec.clone(),
            victim,
            defense,
            norm: norm.clone(),
            budget,
            low: vec![-budget.epsilon; d],
            high: vec![budget.epsilon; d],
            state: EnvState { physical: vec![0.0; spec.state_dim()], t: 0 },
            obs: vec![0.0; d],
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }
}

/// Raw attacked observation for a normalised perturbation, clipped to the budget.
pub fn apply_perturbation(norm: &ObsNormalizer, budget: &AttackBudget, obs: &[f64], delta: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = obs.iter().zip(delta).zip(&norm.std).map(|((o, d), s)| o + s * d).collect();
    budget.project_raw(norm, &raw, obs)
}

impl Task for AdversaryTask<'_> {
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }
    // The adversary acts in observation space.
    fn action_dim(&self) -> usize {
        self.spec.obs_dim
    }
    fn action_low(&self) -> &[f64] {
        &self.low
    }
    fn action_high(&self) -> &[f64] {
        &self.high
    }
    fn gamma(&self) -> f64 {
        self.spec.gamma
    }
    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let (state, obs) = env::reset(&self.spec, seed)?;
        self.state = state;
        self.obs = obs;
        self.victim.reset();
        if let Some(d) = self.defense.as_deref_mut() {
            d.reset(env::stream_seed(seed, 3));
        }
        self.rng = ChaCha8Rng::seed_from_u64(env::stream_seed(seed, 1));
        Ok(self.norm.normalize(&self.obs))
    }

    fn step(&mut self, delta: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        check_dim("adversary action", self.spec.obs_dim, delta.len())?;
        let o_hat = apply_perturbation(&self.norm, &self.budget, &self.obs, delta);
        let input = match self.defense.as_deref_mut() {
            Some(d) => {
                let ctx = HookContext { spec: &self.spec, state: &self.state, t: self.state.t, clean_obs: &self.obs };
                d.apply(&ctx, o_hat, &mut StepNotes::default())?
            }
            None => o_hat,
        };
        let action = self.victim.act(&input, &mut self.rng)?;
        let r = env::step(&self.spec, &self.state, &action)?;
        self.state = r.next_state;
        self.obs = r.next_obs;
        Ok((self.norm.normalize(&self.obs), -r.reward, r.done))
    }
}

/// Train a perturbation policy with the clipped-surrogate trainer. Its mean
/// output `eps * tanh(net(o))` is the deployed perturbation, so an all-zero
/// network perturbs nothing.
pub fn train_optimal_adversary<'a>(
    spec: &EnvSpec,
    victim: &'a mut dyn PolicyAdapter,
    defense: Option<&'a mut dyn ObsHook>,
    norm: &ObsNormalizer,
    budget: AttackBudget,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(PolicyBundle, TrainLog)> {
    let mut task = AdversaryTask::new(spec, victim, defense, norm, budget)?;
    train_ppo_on(&mut task, cfg, seed)
}

/// Deterministic perturbation from a trained adversary.
pub fn adversary_perturb(adversary: &PolicyBundle, norm: &ObsNormalizer, budget: &AttackBudget, obs: &[f64]) -> Result<Vec<f64>> {
    let delta = adversary.mean_action(&norm.normalize(obs))?;
    Ok(apply_perturbation(norm, budget, obs, &delta))
}
