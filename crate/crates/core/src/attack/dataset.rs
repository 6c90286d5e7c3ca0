//! Offline construction of attacked observation sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::budget::{AttackBudget, ObsNormalizer};
use super::hook::{should_attack, AttackKind};
use super::objectives::{opposite_batch, q_batch, ActionMetric};
use super::pgd::PgdConfig;
use crate::env::stream_seed;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;
use crate::policy::PolicyBundle;

/// One clean sequence and its attacked counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSequence {
    /// Index of the clean sequence this was built from.
    pub source: usize,
    pub attack: AttackKind,
    pub clean: Vec<Vec<f64>>,
    /// Equal to `clean` wherever `flags` is false.
    pub attacked: Vec<Vec<f64>>,
    pub flags: Vec<bool>,
}

/// Attack every logged observation sequence with every requested attack.
/// With `c_vul` set, only steps the vulnerability gate selects are perturbed.
/// No environment interaction takes place, so attacks that need it are
/// rejected.
#[allow(clippy::too_many_arguments)]
pub fn build_adv_dataset(
    normal: &[Vec<Vec<f64>>],
    victim: &PolicyBundle,
    norm: &ObsNormalizer,
    attacks: &[AttackKind],
    budget: &AttackBudget,
    pgd: &PgdConfig,
    c_vul: Option<f64>,
    seed: u64,
) -> Result<Vec<AdvSequence>> {
    if let Some(k) = attacks.iter().find(|k| !k.is_offline()) {
        return Err(Error::OnlineOnly(k.as_str().to_string()));
    }
    let metric = ActionMetric::for_bundle(victim);
    let mut out = Vec::with_capacity(normal.len() * attacks.len());
    for (i, seq) in normal.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        for o in seq {
            check_dim("dataset obs", victim.obs_dim, o.len())?;
        }
        let flags: Vec<bool> = match c_vul {
            Some(c) => seq.iter().map(|o| should_attack(victim, c, o)).collect::<Result<_>>()?,
            None => vec![true; seq.len()],
        };
        let clean = Mat::from_rows(seq);
        for (j, &kind) in attacks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, (i * attacks.len() + j) as u64));
            let batch = match kind {
                AttackKind::Opposite => opposite_batch(victim, &metric, norm, &clean, budget, pgd, &mut rng)?,
                AttackKind::QFunction => {
                    let q = victim.q.as_ref().ok_or(Error::MissingQ)?;
                    q_batch(victim, q, norm, &clean, budget, pgd, &mut rng)?
                }
                AttackKind::Optimal | AttackKind::Enchanting => unreachable!("rejected above"),
            };
            let attacked = seq
                .iter()
                .enumerate()
                .map(|(t, o)| if flags[t] { batch.obs_hat.row(t).to_vec() } else { o.clone() })
                .collect();
            out.push(AdvSequence { source: i, attack: kind, clean: seq.clone(), attacked, flags: flags.clone() });
        }
    }
    Ok(out)
}
