//! Gradient-based observation attacks on a differentiable victim.

use rand_chacha::ChaCha8Rng;

use super::budget::{AttackBudget, ObsNormalizer};
use super::cem::{cem_plan, CemConfig, PlanningModel};
use super::pgd::{pgd_maximize, BatchObjective, PgdConfig};
use crate::diff::{Graph, Parameterized, Var};
use crate::error::{check_dim, Result};
use crate::linalg::Mat;
use crate::policy::{Algo, PolicyBundle, QHeads};

/// A deterministic policy whose action is differentiable in the raw observation.
pub trait DiffPolicy {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// `(B x action)` actions for `(B x obs)` raw observations. Parameters
    /// enter the graph as constants.
    fn action_graph(&self, g: &mut Graph<f64>, obs: Var) -> Var;

    fn action_batch(&self, obs: &Mat<f64>) -> Result<Mat<f64>> {
        check_dim("policy obs", self.obs_dim(), obs.cols)?;
        let mut g = Graph::new();
        let x = g.constant(obs.clone());
        let a = self.action_graph(&mut g, x);
        Ok(g.value(a).clone())
    }
}

impl DiffPolicy for PolicyBundle {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn action_graph(&self, g: &mut Graph<f64>, obs: Var) -> Var {
        let vars = self.policy.bind(g, false);
        self.mean_action_graph(g, &vars, obs)
    }
    fn action_batch(&self, obs: &Mat<f64>) -> Result<Mat<f64>> {
        self.mean_action_batch(obs)
    }
}

/// How far apart two actions are for the opposite-action attack.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionMetric {
    /// `|a - b|_2`.
    Euclidean,
    /// `sum_i ((a_i - b_i) / sigma_i)^2` for a Gaussian policy with std `sigma`.
    Mahalanobis(Vec<f64>),
}

impl ActionMetric {
    /// Mahalanobis under the policy covariance for PPO, Euclidean for TD3.
    pub fn for_bundle(b: &PolicyBundle) -> Self {
        match (b.algo, &b.sigma) {
            (Algo::Ppo, Some(s)) => ActionMetric::Mahalanobis(s.clone()),
            _ => ActionMetric::Euclidean,
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            ActionMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            ActionMetric::Mahalanobis(s) => a.iter().zip(b).zip(s).map(|((x, y), s)| ((x - y) / s).powi(2)).sum(),
        }
    }

    /// Row distances of the `(B x action)` difference `diff`.
    pub fn graph(&self, g: &mut Graph<f64>, diff: Var) -> Var {
        match self {
            ActionMetric::Euclidean => g.row_norm2(diff),
            ActionMetric::Mahalanobis(s) => {
                let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
                let z = g.scale_cols(diff, &inv);
                let z2 = g.square(z);
                g.row_sum(z2)
            }
        }
    }
}

fn raw_input(g: &mut Graph<f64>, norm: &ObsNormalizer, x: Var) -> Var {
    norm.denormalize_graph(g, x)
}

/// Distance between the action at the attacked input and a fixed action.
pub struct OppositeObjective<'a> {
    pub policy: &'a dyn DiffPolicy,
    pub norm: &'a ObsNormalizer,
    pub metric: ActionMetric,
    pub clean_action: Mat<f64>,
}

impl BatchObjective for OppositeObjective<'_> {
    fn dim(&self) -> usize {
        self.policy.obs_dim()
    }
    fn batch(&self) -> usize {
        self.clean_action.rows
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let raw = raw_input(g, self.norm, x);
        let a = self.policy.action_graph(g, raw);
        let c = g.constant(self.clean_action.clone());
        let d = g.sub(a, c);
        self.metric.graph(g, d)
    }
}

/// Negated critic value of the action chosen at the attacked input, scored
/// at the true observation.
pub struct QObjective<'a> {
    pub policy: &'a dyn DiffPolicy,
    pub norm: &'a ObsNormalizer,
    pub q: &'a QHeads,
    pub clean_obs: Mat<f64>,
}

impl BatchObjective for QObjective<'_> {
    fn dim(&self) -> usize {
        self.policy.obs_dim()
    }
    fn batch(&self) -> usize {
        self.clean_obs.rows
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let raw = raw_input(g, self.norm, x);
        let a = self.policy.action_graph(g, raw);
        let o = g.constant(self.clean_obs.clone());
        let vars = self.q.bind(g, false);
        let q = self.q.graph(g, &vars, o, a);
        g.neg(q)
    }
}

/// Negated distance between the action at the attacked input and a target.
pub struct TargetObjective<'a> {
    pub policy: &'a dyn DiffPolicy,
    pub norm: &'a ObsNormalizer,
    pub target: Mat<f64>,
}

impl BatchObjective for TargetObjective<'_> {
    fn dim(&self) -> usize {
        self.policy.obs_dim()
    }
    fn batch(&self) -> usize {
        self.target.rows
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let raw = raw_input(g, self.norm, x);
        let a = self.policy.action_graph(g, raw);
        let t = g.constant(self.target.clone());
        let d = g.sub(a, t);
        let n = g.row_norm2(d);
        g.neg(n)
    }
}

/// Result of a batched gradient attack, in raw observation units.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackBatch {
    pub obs_hat: Mat<f64>,
    /// Attack objective at `obs_hat`, in the attack's own sign convention.
    pub value: Vec<f64>,
    pub fell_back: Vec<bool>,
}

/// Run PGD in normalised coordinates around `clean` and map back to raw units.
pub fn attack_batch(obj: &dyn BatchObjective, norm: &ObsNormalizer, clean: &Mat<f64>, budget: &AttackBudget, cfg: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<AttackBatch> {
    check_dim("normalizer dim", norm.dim(), clean.cols)?;
    let mut center = Mat::zeros(clean.rows, clean.cols);
    for r in 0..clean.rows {
        center.row_mut(r).copy_from_slice(&norm.normalize(clean.row(r)));
    }
    let out = pgd_maximize(obj, &center, budget.epsilon, cfg, rng)?;
    let mut obs_hat = Mat::zeros(clean.rows, clean.cols);
    for r in 0..clean.rows {
        let raw = norm.denormalize(out.x.row(r));
        obs_hat.row_mut(r).copy_from_slice(&budget.project_raw(norm, &raw, clean.row(r)));
    }
    Ok(AttackBatch { obs_hat, value: out.value, fell_back: out.fell_back })
}

/// Push the policy's action as far as possible from its clean action.
/// Returns the attacked observations and the achieved action distances.
pub fn opposite_batch(
    policy: &dyn DiffPolicy,
    metric: &ActionMetric,
    norm: &ObsNormalizer,
    clean: &Mat<f64>,
    budget: &AttackBudget,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackBatch> {
    let clean_action = policy.action_batch(clean)?;
    let obj = OppositeObjective { policy, norm, metric: metric.clone(), clean_action };
    attack_batch(&obj, norm, clean, budget, cfg, rng)
}

/// Single-observation opposite-action attack on a victim bundle.
pub fn opposite_attack(bundle: &PolicyBundle, norm: &ObsNormalizer, obs: &[f64], budget: &AttackBudget, cfg: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
    check_dim("obs", bundle.obs_dim, obs.len())?;
    let out = opposite_batch(bundle, &ActionMetric::for_bundle(bundle), norm, &Mat::row_vec(obs), budget, cfg, rng)?;
    Ok((out.obs_hat.row(0).to_vec(), out.value[0]))
}

/// Minimise the critic's value of the induced action.
pub fn q_batch(
    policy: &dyn DiffPolicy,
    q: &QHeads,
    norm: &ObsNormalizer,
    clean: &Mat<f64>,
    budget: &AttackBudget,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackBatch> {
    let obj = QObjective { policy, norm, q, clean_obs: clean.clone() };
    let mut out = attack_batch(&obj, norm, clean, budget, cfg, rng)?;
    out.value.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// Returns the attacked observation and `Q(o, pi(o_hat))`.
pub fn q_attack(bundle: &PolicyBundle, norm: &ObsNormalizer, obs: &[f64], budget: &AttackBudget, cfg: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
    check_dim("obs", bundle.obs_dim, obs.len())?;
    let q = bundle.q.as_ref().ok_or(crate::Error::MissingQ)?;
    let out = q_batch(bundle, q, norm, &Mat::row_vec(obs), budget, cfg, rng)?;
    Ok((out.obs_hat.row(0).to_vec(), out.value[0]))
}

/// Bring the induced action as close as possible to `target`. Returns the
/// attacked observations and the residual action distances.
pub fn target_batch(
    policy: &dyn DiffPolicy,
    norm: &ObsNormalizer,
    clean: &Mat<f64>,
    target: &Mat<f64>,
    budget: &AttackBudget,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackBatch> {
    check_dim("target rows", clean.rows, target.rows)?;
    let obj = TargetObjective { policy, norm, target: target.clone() };
    let mut out = attack_batch(&obj, norm, clean, budget, cfg, rng)?;
    out.value.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// Outcome of one enchanting step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnchantStep {
    pub obs_hat: Vec<f64>,
    /// First action of the adversarial plan.
    pub target: Vec<f64>,
    /// `|pi(obs_hat) - target|_2`.
    pub residual: f64,
}

/// Plan a reward-minimising action sequence from `state` and lure the victim
/// towards its first action.
#[allow(clippy::too_many_arguments)]
pub fn enchanting_attack(
    policy: &dyn DiffPolicy,
    model: &dyn PlanningModel,
    state: &[f64],
    norm: &ObsNormalizer,
    obs: &[f64],
    budget: &AttackBudget,
    cem: &CemConfig,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EnchantStep> {
    let plan = cem_plan(model, state, cem, rng)?;
    let target = plan.actions[0].clone();
    let out = target_batch(policy, norm, &Mat::row_vec(obs), &Mat::row_vec(&target), budget, cfg, rng)?;
    Ok(EnchantStep { obs_hat: out.obs_hat.row(0).to_vec(), target, residual: out.value[0] })
}
