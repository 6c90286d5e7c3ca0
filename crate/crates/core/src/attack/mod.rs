//! Observation-perturbation attacks under an ℓ∞ budget in normalised units.

mod adversary;
mod budget;
mod cem;
mod dataset;
mod hook;
mod objectives;
mod pgd;

pub use adversary::{adversary_perturb, apply_perturbation, train_optimal_adversary, AdversaryTask};
pub use budget::{project_linf, AttackBudget, ObsNormalizer, BUDGET_TOL, MIN_STD};
pub use cem::{cem_plan, sequence_reward, CemConfig, CemPlan, PlanningModel};
pub use dataset::{build_adv_dataset, AdvSequence};
pub use hook::{quantiles, should_attack, tune_c_vul, AttackHook, AttackKind, Attacker, VictimAttacker, VulCandidate, VulSearch, VulTuning, VulnerabilityIndicator};
pub use objectives::{
    attack_batch, enchanting_attack, opposite_attack, opposite_batch, q_attack, q_batch, target_batch, ActionMetric, AttackBatch, DiffPolicy,
    EnchantStep, OppositeObjective, QObjective, TargetObjective,
};
pub use pgd::{evaluate, pgd_maximize, BatchObjective, FnObjective, PgdConfig, PgdOutcome, SumObjective};
