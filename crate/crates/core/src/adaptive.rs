//! White-box attacks that target the full defense: the denoiser-composed
//! policy and the detector residual at once.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    adversary_perturb, attack_batch, cem_plan, train_optimal_adversary, ActionMetric, AttackBudget, AttackKind, Attacker, BatchObjective, CemConfig,
    DiffPolicy, ObsNormalizer, PgdConfig, PlanningModel,
};
use crate::diff::{Graph, Parameterized, Var};
use crate::env::{EnvSpec, HookContext, PolicyAdapter};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;
use crate::policy::{PolicyBundle, PpoConfig, TrainLog};
use crate::shield::{DefendedPolicy, DefenseState, DenoisedStep, GruVae, LatentMode, VaeState};

/// Direction of the detector-residual term inside the maximised objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetTermSign {
    /// The attacker is rewarded for a large residual.
    Plus,
    /// The attacker is rewarded for a small residual, i.e. for evading.
    Minus,
}

impl DetTermSign {
    pub fn factor(self) -> f64 {
        match self {
            DetTermSign::Plus => 1.0,
            DetTermSign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub lambda_det: f64,
    pub det_term_sign: DetTermSign,
    pub pgd: PgdConfig,
    /// Latent draws averaged per objective when the defense samples.
    pub expectation_samples: usize,
    pub cem: CemConfig,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { lambda_det: 1.0, det_term_sign: DetTermSign::Plus, pgd: PgdConfig::default(), expectation_samples: 4, cem: CemConfig::default() }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_det >= 0.0 && self.lambda_det.is_finite()) {
            return Err(Error::Config(format!("lambda_det must be finite and >= 0, got {}", self.lambda_det)));
        }
        if self.expectation_samples == 0 {
            return Err(Error::Config("expectation_samples must be >= 1".into()));
        }
        self.pgd.validate()?;
        self.cem.validate()
    }

    fn det_weight(&self) -> f64 {
        self.det_term_sign.factor() * self.lambda_det
    }
}

/// `|det(o_hat) - o|_inf` in the detector's normalised units, one step from
/// `state`. The state is not advanced.
pub fn l_det_loss(detector: &GruVae, obs: &[f64], obs_hat: &[f64], state: &VaeState) -> Result<f64> {
    check_dim("l_det obs", detector.obs_dim, obs.len())?;
    let mut s = state.clone();
    let out = detector.step(obs_hat, &mut s, None)?;
    Ok(out.out_norm.iter().zip(detector.norm.normalize(obs)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Task-specific half of the joint objective, maximised.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptiveGoal {
    /// Distance from the denoised policy's clean action.
    Opposite,
    /// Negated critic value at the true observation.
    QFunction,
    /// Negated distance to a target action.
    Target(Vec<f64>),
}

/// One draw of latent noise for the detector and the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    pub detector: Option<Vec<f64>>,
    pub denoiser: Option<Vec<f64>>,
}

/// Joint objective `goal(pi(den(o_hat))) + sign * lambda * l_det(o, o_hat)`,
/// averaged over latent draws, for one observation. PGD coordinates are the
/// attack normaliser's units.
pub struct AdaptiveObjective<'a> {
    pub defense: &'a DefendedPolicy<'a>,
    pub state: &'a DefenseState,
    pub norm: &'a ObsNormalizer,
    pub obs: Vec<f64>,
    pub goal: AdaptiveGoal,
    pub det_weight: f64,
    pub draws: Vec<LatentDraw>,
    metric: ActionMetric,
    /// Denoised clean action per draw, for the opposite goal.
    clean_actions: Vec<Mat<f64>>,
}

impl<'a> AdaptiveObjective<'a> {
    pub fn new(
        defense: &'a DefendedPolicy<'a>,
        state: &'a DefenseState,
        norm: &'a ObsNormalizer,
        obs: &[f64],
        goal: AdaptiveGoal,
        det_weight: f64,
        draws: Vec<LatentDraw>,
    ) -> Result<Self> {
        check_dim("adaptive obs", defense.victim.obs_dim, obs.len())?;
        if draws.is_empty() {
            return Err(Error::Invalid("adaptive objective needs at least one latent draw".into()));
        }
        if matches!(goal, AdaptiveGoal::QFunction) && defense.victim.q.is_none() {
            return Err(Error::MissingQ);
        }
        let mut obj = Self {
            defense,
            state,
            norm,
            obs: obs.to_vec(),
            goal,
            det_weight,
            draws,
            metric: ActionMetric::for_bundle(defense.victim),
            clean_actions: Vec::new(),
        };
        if obj.goal == AdaptiveGoal::Opposite {
            let clean = Mat::row_vec(obs);
            obj.clean_actions = (0..obj.draws.len()).map(|k| obj.denoised_policy(k).action_batch(&clean)).collect::<Result<_>>()?;
        }
        Ok(obj)
    }

    fn denoised_policy(&self, k: usize) -> DenoisedStep<'a> {
        let mut p = DenoisedStep::from_state(self.defense.denoiser, self.defense.victim, &self.state.denoiser);
        p.noise = self.draws[k].denoiser.as_deref().map(Mat::row_vec);
        p
    }

    fn det_graph(&self, g: &mut Graph<f64>, raw: Var, k: usize) -> Var {
        let det = self.defense.detector;
        let vars = det.bind(g, false);
        let inv: Vec<f64> = det.norm.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = det.norm.mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
        let x = g.affine_cols(raw, &inv, &shift);
        let he = g.constant(Mat::row_vec(&self.state.detector.h_enc));
        let hd = g.constant(Mat::row_vec(&self.state.detector.h_dec));
        let nv = self.draws[k].detector.as_deref().map(|n| g.constant(Mat::row_vec(n)));
        let s = det.step_graph(g, &vars, x, he, hd, nv);
        let target = g.constant(Mat::row_vec(&det.norm.normalize(&self.obs)));
        let d = g.sub(s.out, target);
        g.row_max_abs(d)
    }

    fn goal_graph(&self, g: &mut Graph<f64>, raw: Var, k: usize) -> Var {
        let policy = self.denoised_policy(k);
        let a = policy.action_graph(g, raw);
        match &self.goal {
            AdaptiveGoal::Opposite => {
                let c = g.constant(self.clean_actions[k].clone());
                let d = g.sub(a, c);
                self.metric.graph(g, d)
            }
            AdaptiveGoal::QFunction => {
                let q = self.defense.victim.q.as_ref().expect("checked in new");
                let vars = q.bind(g, false);
                let o = g.constant(Mat::row_vec(&self.obs));
                let v = q.graph(g, &vars, o, a);
                g.neg(v)
            }
            AdaptiveGoal::Target(t) => {
                let t = g.constant(Mat::row_vec(t));
                let d = g.sub(a, t);
                let n = g.row_norm2(d);
                g.neg(n)
            }
        }
    }
}

impl BatchObjective for AdaptiveObjective<'_> {
    fn dim(&self) -> usize {
        self.obs.len()
    }
    fn batch(&self) -> usize {
        1
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let raw = self.norm.denormalize_graph(g, x);
        let mut total: Option<Var> = None;
        for k in 0..self.draws.len() {
            let mut term = self.goal_graph(g, raw, k);
            if self.det_weight != 0.0 {
                let l = self.det_graph(g, raw, k);
                let l = g.scale(l, self.det_weight);
                term = g.add(term, l);
            }
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        g.scale(total.expect("at least one draw"), 1.0 / self.draws.len() as f64)
    }
}

/// Result of one adaptive attack step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub obs_hat: Vec<f64>,
    /// Joint objective at `obs_hat` (maximised).
    pub objective: f64,
    /// Joint objective at the clean observation, same draws.
    pub clean_objective: f64,
}

/// Latent draws for the defense's mode: a single mean draw, or
/// `expectation_samples` sampled ones.
pub fn latent_draws(defense: &DefendedPolicy<'_>, samples: usize, rng: &mut ChaCha8Rng) -> Vec<LatentDraw> {
    match defense.latent {
        LatentMode::Mean => vec![LatentDraw { detector: None, denoiser: None }],
        LatentMode::Sample => (0..samples.max(1))
            .map(|_| LatentDraw {
                detector: defense.detector.draw_noise(LatentMode::Sample, rng),
                denoiser: defense.denoiser.draw_noise(LatentMode::Sample, rng),
            })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_adaptive(
    defense: &DefendedPolicy<'_>,
    state: &DefenseState,
    norm: &ObsNormalizer,
    obs: &[f64],
    goal: AdaptiveGoal,
    budget: &AttackBudget,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptiveOutcome> {
    cfg.validate()?;
    let draws = latent_draws(defense, cfg.expectation_samples, rng);
    let obj = AdaptiveObjective::new(defense, state, norm, obs, goal, cfg.det_weight(), draws)?;
    let clean = Mat::row_vec(obs);
    let clean_objective = crate::attack::evaluate(&obj, &Mat::row_vec(&norm.normalize(obs)), false)?.0[0];
    let out = attack_batch(&obj, norm, &clean, budget, &cfg.pgd, rng)?;
    Ok(AdaptiveOutcome { obs_hat: out.obs_hat.row(0).to_vec(), objective: out.value[0], clean_objective })
}

/// Maximise the denoised policy's action shift plus the weighted detector term.
pub fn adaptive_opposite(
    defense: &DefendedPolicy<'_>,
    state: &DefenseState,
    norm: &ObsNormalizer,
    obs: &[f64],
    budget: &AttackBudget,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptiveOutcome> {
    run_adaptive(defense, state, norm, obs, AdaptiveGoal::Opposite, budget, cfg, rng)
}

/// Minimise `Q(o, pi(den(o_hat)))` minus the weighted detector term; the
/// reported objective is the maximised negation.
pub fn adaptive_q(
    defense: &DefendedPolicy<'_>,
    state: &DefenseState,
    norm: &ObsNormalizer,
    obs: &[f64],
    budget: &AttackBudget,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptiveOutcome> {
    run_adaptive(defense, state, norm, obs, AdaptiveGoal::QFunction, budget, cfg, rng)
}

/// Steer the denoised policy toward the first action of an adversarial plan
/// from the true environment state.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_enchanting(
    defense: &DefendedPolicy<'_>,
    state: &DefenseState,
    model: &dyn PlanningModel,
    env_state: &[f64],
    norm: &ObsNormalizer,
    obs: &[f64],
    budget: &AttackBudget,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptiveOutcome> {
    let plan = cem_plan(model, env_state, &cfg.cem, rng)?;
    adaptive_target(defense, state, norm, obs, &plan.actions[0], budget, cfg, rng)
}

/// Bring the denoised policy's action toward `target` under the joint objective.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_target(
    defense: &DefendedPolicy<'_>,
    state: &DefenseState,
    norm: &ObsNormalizer,
    obs: &[f64],
    target: &[f64],
    budget: &AttackBudget,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptiveOutcome> {
    check_dim("adaptive target", defense.victim.action_dim, target.len())?;
    run_adaptive(defense, state, norm, obs, AdaptiveGoal::Target(target.to_vec()), budget, cfg, rng)
}

/// Train a perturbation policy against the victim wrapped in the full defense.
pub fn adaptive_optimal(
    defense: &DefendedPolicy<'_>,
    spec: &EnvSpec,
    norm: &ObsNormalizer,
    budget: AttackBudget,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(PolicyBundle, TrainLog)> {
    let mut actor = defense.victim.actor(defense.act_mode);
    let mut hook = defense.hook();
    train_optimal_adversary(spec, &mut actor as &mut dyn PolicyAdapter, Some(&mut hook), norm, budget, cfg, seed)
}

/// `(R_adaptive - R_defense) / R_defense`.
pub fn reward_change(adaptive: f64, defended: f64) -> f64 {
    (adaptive - defended) / defended
}

/// Online adaptive attacker. Keeps a mean-latent shadow of the defense's
/// recurrent states, advanced with every delivered observation.
pub struct AdaptiveAttacker<'a> {
    pub kind: AttackKind,
    pub defense: DefendedPolicy<'a>,
    pub norm: &'a ObsNormalizer,
    pub budget: AttackBudget,
    pub cfg: AdaptiveConfig,
    /// Required for [`AttackKind::Optimal`]: an adversary trained with [`adaptive_optimal`].
    pub adversary: Option<&'a PolicyBundle>,
    shadow: DefenseState,
}

impl<'a> AdaptiveAttacker<'a> {
    pub fn new(kind: AttackKind, defense: DefendedPolicy<'a>, norm: &'a ObsNormalizer, budget: AttackBudget, cfg: AdaptiveConfig) -> Self {
        Self { kind, shadow: defense.initial_state(), defense, norm, budget, cfg, adversary: None }
    }

    pub fn with_adversary(mut self, adversary: &'a PolicyBundle) -> Self {
        self.adversary = Some(adversary);
        self
    }

    pub fn shadow(&self) -> &DefenseState {
        &self.shadow
    }
}

impl Attacker for AdaptiveAttacker<'_> {
    fn name(&self) -> String {
        format!("adaptive_{}", self.kind)
    }

    fn reset(&mut self, _seed: u64) {
        self.shadow = self.defense.initial_state();
    }

    fn perturb(&mut self, ctx: &HookContext<'_>, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let d = &self.defense;
        let out = match self.kind {
            AttackKind::Opposite => adaptive_opposite(d, &self.shadow, self.norm, obs, &self.budget, &self.cfg, rng)?,
            AttackKind::QFunction => adaptive_q(d, &self.shadow, self.norm, obs, &self.budget, &self.cfg, rng)?,
            AttackKind::Enchanting => adaptive_enchanting(d, &self.shadow, ctx.spec, &ctx.state.physical, self.norm, obs, &self.budget, &self.cfg, rng)?,
            AttackKind::Optimal => {
                let adv = self.adversary.ok_or_else(|| Error::Config("adaptive optimal attack needs a trained adversary".into()))?;
                return adversary_perturb(adv, self.norm, &self.budget, obs);
            }
        };
        Ok(out.obs_hat)
    }

    fn delivered(&mut self, _ctx: &HookContext<'_>, obs: &[f64]) -> Result<()> {
        self.defense.detector.step(obs, &mut self.shadow.detector, None)?;
        self.defense.denoiser.step(obs, &mut self.shadow.denoiser, None)?;
        Ok(())
    }
}
