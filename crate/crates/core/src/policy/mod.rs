//! Victim policies: deterministic TD3 and Gaussian PPO bundles.

mod bundle;
mod ppo;
mod qfit;
mod td3;

use serde::{Deserialize, Serialize};

pub use bundle::{ActMode, ActionDecision, Algo, BundleActor, PolicyBundle, QHeads, ValueNet};
pub use ppo::{gae, normalize_advantages, train_ppo, train_ppo_on, PpoConfig};
pub use qfit::{train_q_for_ppo, QFitConfig, QFitReport, Transition};
pub use td3::{train_td3, train_td3_on, ReplayBuffer, Td3Config, TD3_EVAL_STREAM};

/// Training curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episode_returns: Vec<f64>,
    pub losses: Vec<f64>,
}
