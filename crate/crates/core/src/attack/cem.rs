//! Cross-entropy planning of reward-minimising action sequences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};

/// Known one-step dynamics for planning.
pub trait PlanningModel {
    fn action_low(&self) -> &[f64];
    fn action_high(&self) -> &[f64];
    /// Next state and reward after applying an in-bounds action.
    fn simulate(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64);
}

impl PlanningModel for EnvSpec {
    fn action_low(&self) -> &[f64] {
        &self.action_low
    }
    fn action_high(&self) -> &[f64] {
        &self.action_high
    }
    fn simulate(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        self.dynamics(state, action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial std as a fraction of the half action range.
    pub init_std_frac: f64,
    pub min_std: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { horizon: 15, population: 64, elites: 8, iterations: 5, init_std_frac: 1.0, min_std: 1e-3 }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.elites == 0 || self.population <= self.elites {
            return Err(Error::Config("cem needs horizon >= 1 and population > elites >= 1".into()));
        }
        if !(self.init_std_frac >= 0.0 && self.min_std >= 0.0) {
            return Err(Error::Config("cem standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemPlan {
    /// `horizon` actions, each within the action bounds.
    pub actions: Vec<Vec<f64>>,
    /// Cumulative reward of `actions` under the model.
    pub total_reward: f64,
}

/// Cumulative reward of an action sequence from `state`.
pub fn sequence_reward(model: &dyn PlanningModel, state: &[f64], actions: &[Vec<f64>]) -> f64 {
    let mut s = state.to_vec();
    let mut total = 0.0;
    for a in actions {
        let (next, r) = model.simulate(&s, a);
        total += r;
        s = next;
    }
    total
}

fn clip(a: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in a.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Final sampling mean after `iterations` rounds of refitting to the lowest
/// reward elites. Zero iterations return the initial mean: zero, clipped
/// into bounds.
pub fn cem_plan(model: &dyn PlanningModel, state: &[f64], cfg: &CemConfig, rng: &mut ChaCha8Rng) -> Result<CemPlan> {
    cfg.validate()?;
    let (lo, hi) = (model.action_low().to_vec(), model.action_high().to_vec());
    let ad = lo.len();
    let h = cfg.horizon;
    let mut mean = vec![vec![0.0; ad]; h];
    mean.iter_mut().for_each(|a| clip(a, &lo, &hi));
    let mut std: Vec<Vec<f64>> = vec![lo.iter().zip(&hi).map(|(l, u)| cfg.init_std_frac * 0.5 * (u - l)).collect(); h];

    for _ in 0..cfg.iterations {
        let mut scored: Vec<(f64, Vec<Vec<f64>>)> = (0..cfg.population)
            .map(|_| {
                let seq: Vec<Vec<f64>> = (0..h)
                    .map(|t| {
                        let mut a: Vec<f64> = (0..ad).map(|j| mean[t][j] + std[t][j] * rng.sample::<f64, _>(StandardNormal)).collect();
                        clip(&mut a, &lo, &hi);
                        a
                    })
                    .collect();
                (sequence_reward(model, state, &seq), seq)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let elites = &scored[..cfg.elites];
        let m = cfg.elites as f64;
        for t in 0..h {
            for j in 0..ad {
                let mu = elites.iter().map(|e| e.1[t][j]).sum::<f64>() / m;
                let var = elites.iter().map(|e| (e.1[t][j] - mu).powi(2)).sum::<f64>() / m;
                mean[t][j] = mu;
                std[t][j] = var.sqrt().max(cfg.min_std);
            }
        }
    }
    let total_reward = sequence_reward(model, state, &mean);
    Ok(CemPlan { actions: mean, total_reward })
}
