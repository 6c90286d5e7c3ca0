//! Shared fixtures for the pipeline tests.

#![allow(dead_code)]

use std::path::Path;

use detden::harness::ExperimentConfig;

/// Smallest configuration that exercises every stage in seconds.
pub const TINY: &str = r#"
horizon = 40
normal_trajectories = 6
calibration_trajectories = 3
rollouts = 3
qfit_episodes = 3
[td3]
total_steps = 1500
start_steps = 500
batch_size = 32
[ppo]
total_steps = 1600
rollout_steps = 400
epochs = 2
[adversary]
total_steps = 800
rollout_steps = 400
epochs = 1
[qfit]
updates = 100
[shield]
hidden_dim = 8
latent_dim = 4
epochs = 2
batch_size = 8
window = 16
[cem]
horizon = 3
population = 8
elites = 2
iterations = 1
[adaptive]
expectation_samples = 1
[adaptive.cem]
horizon = 3
population = 8
elites = 2
iterations = 1
"#;

pub fn tiny(dir: &Path, overrides: &[&str]) -> ExperimentConfig {
    let file = dir.join("tiny.toml");
    std::fs::write(&file, TINY).unwrap();
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(Some(&file), &overrides).unwrap()
}
