//! Experiment configuration: defaults, a TOML file layer and dotted-key
//! overrides, in that order of precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveConfig;
use crate::attack::{AttackBudget, AttackKind, CemConfig, PgdConfig};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{Algo, PpoConfig, QFitConfig, Td3Config};
use crate::shield::{LatentMode, ShieldConfig};

/// Reference sizes the desk defaults are scaled from; echoed in reports.
pub const REFERENCE_TRAJECTORIES: usize = 10_000;
pub const REFERENCE_HORIZON: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: String,
    /// Overrides the environment's episode length.
    pub horizon: Option<usize>,
    pub algo: Algo,
    /// Budget radius in normalised observation units.
    pub epsilon: f64,
    pub attacks: Vec<AttackKind>,
    /// Offline attacks used to build the denoiser's training pairs and to
    /// calibrate the detector threshold.
    pub offline_attacks: Vec<AttackKind>,
    pub pgd: PgdConfig,
    pub cem: CemConfig,
    pub adaptive: AdaptiveConfig,
    pub td3: Td3Config,
    pub ppo: PpoConfig,
    /// Critic fitted to a PPO victim so Q-based attacks apply.
    pub qfit: QFitConfig,
    /// Episodes collected for the PPO critic fit.
    pub qfit_episodes: usize,
    /// Trainer of the learned (optimal) adversary, plain and adaptive.
    pub adversary: PpoConfig,
    pub shield: ShieldConfig,
    /// Robustness regulariser in the denoiser objective.
    pub regularize: bool,
    pub latent_mode: LatentMode,
    /// Largest tolerated detector false-negative rate when calibrating.
    pub fnr_max: f64,
    /// Held-out clean episodes used to calibrate the detector threshold.
    pub calibration_trajectories: usize,
    /// Clean episodes in the normal dataset.
    pub normal_trajectories: usize,
    /// Rollouts per evaluation cell.
    pub rollouts: usize,
    /// Attack only in low-value states, with at most this fraction of steps attacked.
    pub vulnerability_max_frequency: Option<f64>,
    /// Episodes per candidate in the vulnerability threshold search.
    pub vulnerability_episodes: usize,
    /// Threads for evaluation rollouts.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: "point_mass_2d".into(),
            horizon: None,
            algo: Algo::Td3,
            epsilon: 1.0,
            attacks: AttackKind::ALL.to_vec(),
            offline_attacks: vec![AttackKind::Opposite, AttackKind::QFunction],
            pgd: PgdConfig::default(),
            cem: CemConfig::default(),
            adaptive: AdaptiveConfig::default(),
            td3: Td3Config::default(),
            ppo: PpoConfig::default(),
            qfit: QFitConfig::default(),
            qfit_episodes: 100,
            adversary: PpoConfig { total_steps: 100_000, ..PpoConfig::default() },
            shield: ShieldConfig::default(),
            regularize: false,
            latent_mode: LatentMode::Mean,
            fnr_max: 0.02,
            calibration_trajectories: 20,
            normal_trajectories: 500,
            rollouts: 100,
            vulnerability_max_frequency: None,
            vulnerability_episodes: 5,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec::by_name(&self.env)?;
        Ok(match self.horizon {
            Some(h) => spec.with_horizon(h),
            None => spec,
        })
    }

    pub fn budget(&self) -> Result<AttackBudget> {
        AttackBudget::new(self.epsilon).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec()?.validate()?;
        self.budget()?;
        if self.offline_attacks.iter().any(|k| !k.is_offline()) {
            return Err(Error::Config("offline_attacks may only name opposite and q_function".into()));
        }
        if !(0.0..=1.0).contains(&self.fnr_max) {
            return Err(Error::Config("fnr_max must lie in [0, 1]".into()));
        }
        if self.rollouts == 0 || self.workers == 0 {
            return Err(Error::Config("rollouts and workers must be positive".into()));
        }
        if let Some(f) = self.vulnerability_max_frequency {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("vulnerability_max_frequency must lie in [0, 1]".into()));
            }
        }
        self.pgd.validate().map_err(as_config)?;
        self.cem.validate().map_err(as_config)?;
        self.adaptive.validate().map_err(as_config)?;
        self.shield.validate().map_err(as_config)
    }

    /// Defaults, then `file` if given, then each `key.path=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let layer: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, layer);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Tables merge key by key; any other value replaces the base.
fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
pub fn apply_override(table: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let t = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {spec:?}: {k} is not a table")))?;
        cur = t.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let t = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {spec:?}: parent is not a table")))?;
    t.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
