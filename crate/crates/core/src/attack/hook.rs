//! Online attackers, the vulnerability gate and its threshold search.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversary::adversary_perturb;
use super::budget::{AttackBudget, ObsNormalizer};
use super::cem::CemConfig;
use super::objectives::{enchanting_attack, opposite_attack, q_attack};
use super::pgd::PgdConfig;
use crate::env::{self, EnvSpec, HookContext, HookStage, ObsHook, StepHooks, StepNotes};
use crate::error::{Error, Result};
use crate::policy::PolicyBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Opposite,
    QFunction,
    Optimal,
    Enchanting,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Opposite, AttackKind::QFunction, AttackKind::Optimal, AttackKind::Enchanting];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Opposite => "opposite",
            AttackKind::QFunction => "q_function",
            AttackKind::Optimal => "optimal",
            AttackKind::Enchanting => "enchanting",
        }
    }

    /// Whether the attack can be computed from logged observations alone.
    pub fn is_offline(self) -> bool {
        matches!(self, AttackKind::Opposite | AttackKind::QFunction)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opposite" => Ok(AttackKind::Opposite),
            "q_function" | "q" => Ok(AttackKind::QFunction),
            "optimal" => Ok(AttackKind::Optimal),
            "enchanting" => Ok(AttackKind::Enchanting),
            other => Err(Error::UnknownAttack(other.to_string())),
        }
    }
}

/// Produces an attacked observation at one step.
pub trait Attacker {
    fn name(&self) -> String;
    fn reset(&mut self, _seed: u64) {}
    /// Raw attacked observation for clean `obs`.
    fn perturb(&mut self, ctx: &HookContext<'_>, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    /// Called every step with what the victim side actually received, attacked or not.
    fn delivered(&mut self, _ctx: &HookContext<'_>, _obs: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// The four attacks against an undefended victim.
pub struct VictimAttacker<'a> {
    pub kind: AttackKind,
    pub victim: &'a PolicyBundle,
    pub norm: &'a ObsNormalizer,
    pub budget: AttackBudget,
    pub pgd: PgdConfig,
    pub cem: CemConfig,
    /// Required for [`AttackKind::Optimal`].
    pub adversary: Option<&'a PolicyBundle>,
}

impl<'a> VictimAttacker<'a> {
    pub fn new(kind: AttackKind, victim: &'a PolicyBundle, norm: &'a ObsNormalizer, budget: AttackBudget) -> Self {
        Self { kind, victim, norm, budget, pgd: PgdConfig::default(), cem: CemConfig::default(), adversary: None }
    }

    pub fn with_adversary(mut self, adversary: &'a PolicyBundle) -> Self {
        self.adversary = Some(adversary);
        self
    }
}

impl Attacker for VictimAttacker<'_> {
    fn name(&self) -> String {
        self.kind.as_str().to_string()
    }

    fn perturb(&mut self, ctx: &HookContext<'_>, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self.kind {
            AttackKind::Opposite => Ok(opposite_attack(self.victim, self.norm, obs, &self.budget, &self.pgd, rng)?.0),
            AttackKind::QFunction => Ok(q_attack(self.victim, self.norm, obs, &self.budget, &self.pgd, rng)?.0),
            AttackKind::Optimal => {
                let adv = self.adversary.ok_or_else(|| Error::Config("optimal attack needs a trained adversary".into()))?;
                adversary_perturb(adv, self.norm, &self.budget, obs)
            }
            AttackKind::Enchanting => Ok(enchanting_attack(
                self.victim,
                ctx.spec,
                &ctx.state.physical,
                self.norm,
                obs,
                &self.budget,
                &self.cem,
                &self.pgd,
                rng,
            )?
            .obs_hat),
        }
    }
}

/// True when the state looks valuable enough to be worth sparing:
/// attack iff `value(o) < c_vul`.
pub fn should_attack(bundle: &PolicyBundle, c_vul: f64, obs: &[f64]) -> Result<bool> {
    Ok(bundle.state_value(obs)? < c_vul)
}

/// Gate that restricts attacks to low-value states.
#[derive(Debug, Clone, Copy)]
pub struct VulnerabilityIndicator<'a> {
    pub bundle: &'a PolicyBundle,
    pub c_vul: f64,
}

impl VulnerabilityIndicator<'_> {
    pub fn should_attack(&self, obs: &[f64]) -> Result<bool> {
        should_attack(self.bundle, self.c_vul, obs)
    }
}

/// Attack-stage rollout hook. The gate is evaluated on the clean observation
/// and every output is clipped into the budget.
pub struct AttackHook<'a> {
    pub attacker: Box<dyn Attacker + 'a>,
    pub norm: &'a ObsNormalizer,
    pub budget: AttackBudget,
    pub gate: Option<VulnerabilityIndicator<'a>>,
    rng: ChaCha8Rng,
}

impl<'a> AttackHook<'a> {
    pub fn new(attacker: Box<dyn Attacker + 'a>, norm: &'a ObsNormalizer, budget: AttackBudget, gate: Option<VulnerabilityIndicator<'a>>) -> Self {
        Self { attacker, norm, budget, gate, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl ObsHook for AttackHook<'_> {
    fn stage(&self) -> HookStage {
        HookStage::Attack
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.attacker.reset(seed);
    }

    fn apply(&mut self, ctx: &HookContext<'_>, obs: Vec<f64>, notes: &mut StepNotes) -> Result<Vec<f64>> {
        let attack = match &self.gate {
            Some(g) => g.should_attack(ctx.clean_obs)?,
            None => true,
        };
        let out = if attack {
            let raw = self.attacker.perturb(ctx, &obs, &mut self.rng)?;
            notes.attacked = true;
            notes.attack = Some(self.attacker.name());
            self.budget.project_raw(self.norm, &raw, ctx.clean_obs)
        } else {
            obs
        };
        self.attacker.delivered(ctx, &out)?;
        Ok(out)
    }
}

/// Row of a threshold search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulCandidate {
    pub c_vul: f64,
    pub attack_frequency: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulTuning {
    pub c_vul: f64,
    pub candidates: Vec<VulCandidate>,
}

/// Empirical quantiles (linear interpolation) of `values`.
pub fn quantiles(values: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("quantile values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(qs
        .iter()
        .map(|&q| {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        })
        .collect())
}

/// Settings for [`tune_c_vul`].
#[derive(Debug, Clone, PartialEq)]
pub struct VulSearch {
    /// Highest tolerated fraction of attacked steps.
    pub max_frequency: f64,
    pub episodes: u64,
    pub seed: u64,
}

/// Choose the threshold with the lowest victim return among those whose
/// attack frequency stays within `max_frequency`; ties go to the lower
/// frequency. When nothing qualifies, or the winner never attacks, the result
/// is `min(normal_values) - 1`, a threshold that never fires on normal data.
pub fn tune_c_vul<'a>(
    spec: &EnvSpec,
    victim: &'a PolicyBundle,
    normal_values: &[f64],
    candidates: &[f64],
    search: &VulSearch,
    make_hook: &mut dyn FnMut(VulnerabilityIndicator<'a>) -> AttackHook<'a>,
) -> Result<VulTuning> {
    if candidates.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if normal_values.is_empty() {
        return Err(Error::EmptyDataset("normal values"));
    }
    let floor = normal_values.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut rows = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let (mut ret, mut freq) = (0.0, 0.0);
        for ep in 0..search.episodes {
            let hook = make_hook(VulnerabilityIndicator { bundle: victim, c_vul: c });
            let mut hooks = StepHooks::none().with(hook);
            let traj = env::rollout(spec, &mut victim.actor(victim.deploy_mode()), &mut hooks, search.seed + ep)?;
            ret += traj.undiscounted_return();
            freq += traj.attack_frequency();
        }
        let n = search.episodes.max(1) as f64;
        rows.push(VulCandidate { c_vul: c, attack_frequency: freq / n, mean_return: ret / n });
    }
    let best = rows
        .iter()
        .filter(|r| r.attack_frequency <= search.max_frequency)
        .min_by(|a, b| a.mean_return.total_cmp(&b.mean_return).then(a.attack_frequency.total_cmp(&b.attack_frequency)));
    let c_vul = match best {
        Some(r) if r.attack_frequency > 0.0 => r.c_vul,
        _ => floor,
    };
    Ok(VulTuning { c_vul, candidates: rows })
}
