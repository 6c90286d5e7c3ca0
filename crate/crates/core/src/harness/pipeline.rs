//! Pipeline stages. Each stage reads its inputs from the output directory
//! and writes its artifacts back, so stages can run as separate processes.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_model, save_model};
use super::config::{ExperimentConfig, REFERENCE_HORIZON, REFERENCE_TRAJECTORIES};
use super::dataset::{missing, Dataset};
use super::metrics::*;
use crate::adaptive::{adaptive_optimal, reward_change, AdaptiveAttacker};
use crate::attack::*;
use crate::env::{self, env_step_count, stream_seed, EnvSpec, StepHooks, Trajectory};
use crate::error::{Error, Result};
use crate::policy::*;
use crate::shield::*;

/// Observations differing from the clean one by at most this much (raw
/// ℓ∞) count as unperturbed.
pub const PERTURBED_TOL: f64 = 1e-6;

const VICTIM: &str = "victim.json";
const NORMAL: &str = "normal.ndjson";
const CALIBRATION: &str = "calibration.ndjson";
const ADVERSARIAL: &str = "adversarial.ndjson";
const DETECTOR: &str = "detector.json";
const DENOISER: &str = "denoiser.json";
const THRESHOLDS: &str = "thresholds.json";
const ADVERSARY: &str = "adversary.json";
const ADAPTIVE_ADVERSARY: &str = "adaptive_adversary.json";
const METRICS: &str = "metrics.json";
const RESOLVED_CONFIG: &str = "config.toml";

const POLICY_KIND: &str = "policy_bundle";
const VAE_KIND: &str = "gru_vae";

// Seed streams of the stages.
const S_POLICY: u64 = 1;
const S_QFIT: u64 = 2;
const S_NORMAL: u64 = 3;
const S_CALIBRATION: u64 = 4;
const S_AUGMENT: u64 = 5;
const S_DETECTOR: u64 = 6;
const S_DENOISER: u64 = 7;
const S_SCORES: u64 = 8;
const S_ADVERSARY: u64 = 9;
const S_VUL: u64 = 10;
const S_EVAL: u64 = 11;
const S_ADAPTIVE: u64 = 12;

/// Environment steps a stage consumed on the calling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub env_steps: u64,
}

fn counted(f: impl FnOnce() -> Result<()>) -> Result<StageReport> {
    let before = env_step_count();
    f()?;
    Ok(StageReport { env_steps: env_step_count() - before })
}

/// `n` episode seeds of one stream.
pub fn episode_seeds(seed: u64, stream: u64, n: usize) -> Vec<u64> {
    let base = stream_seed(seed, stream);
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// `n_traj` clean full-horizon episodes with the victim's deployment mode.
pub fn collect_normal(bundle: &PolicyBundle, spec: &EnvSpec, n_traj: usize, seed: u64) -> Result<Dataset> {
    bundle.matches_env(spec)?;
    let trajs = episode_seeds(seed, S_NORMAL, n_traj)
        .into_iter()
        .map(|s| env::rollout(spec, &mut bundle.actor(bundle.deploy_mode()), &mut StepHooks::none(), s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_trajectories(&trajs))
}

/// Held-out denoiser error on one offline attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMae {
    pub attack: AttackKind,
    pub denoised: Metric,
    pub attacked: Metric,
}

/// Output of threshold tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub c_anomaly: f64,
    pub calibration: ThresholdPoint,
    pub admissible: bool,
    pub n_clean: usize,
    pub n_attacked: usize,
    pub c_vul: Option<f64>,
    pub heldout: Vec<HeldoutMae>,
}

/// Artifact directory plus the configuration that produced it.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

struct Loaded {
    spec: EnvSpec,
    victim: PolicyBundle,
    norm: ObsNormalizer,
    detector: GruVae,
    denoiser: GruVae,
    thresholds: Thresholds,
    adversary: Option<PolicyBundle>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path(METRICS)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    pub fn load_victim(&self) -> Result<PolicyBundle> {
        let b: PolicyBundle = load_model(&self.require(VICTIM)?, POLICY_KIND)?;
        b.validate()?;
        b.matches_env(&self.cfg.env_spec()?)?;
        Ok(b)
    }

    pub fn load_normal(&self) -> Result<Dataset> {
        Dataset::load(&self.require(NORMAL)?)
    }

    pub fn load_calibration(&self) -> Result<Dataset> {
        Dataset::load(&self.require(CALIBRATION)?)
    }

    pub fn load_detector(&self) -> Result<GruVae> {
        load_model(&self.require(DETECTOR)?, VAE_KIND)
    }

    pub fn load_denoiser(&self) -> Result<GruVae> {
        load_model(&self.require(DENOISER)?, VAE_KIND)
    }

    pub fn load_thresholds(&self) -> Result<Thresholds> {
        read_json(&self.require(THRESHOLDS)?)
    }

    pub fn load_metrics(&self) -> Result<MetricsReport> {
        read_json(&self.require(METRICS)?)
    }

    fn normalizer(&self) -> Result<ObsNormalizer> {
        Dataset::load_stats(&self.require(NORMAL)?)?.normalizer()
    }

    fn seed(&self, stream: u64) -> u64 {
        stream_seed(self.cfg.seed, stream)
    }

    /// Train the victim; PPO victims also get a fitted critic.
    pub fn train_policy(&self) -> Result<StageReport> {
        counted(|| {
            let spec = self.cfg.env_spec()?;
            let (bundle, log) = match self.cfg.algo {
                Algo::Td3 => train_td3(&spec, &self.cfg.td3, self.seed(S_POLICY))?,
                Algo::Ppo => {
                    let (b, log) = train_ppo(&spec, &self.cfg.ppo, self.seed(S_POLICY))?;
                    let mut data = Vec::new();
                    for s in episode_seeds(self.cfg.seed, S_QFIT, self.cfg.qfit_episodes) {
                        let traj = env::rollout(&spec, &mut b.actor(b.deploy_mode()), &mut StepHooks::none(), s)?;
                        data.extend(traj.steps.windows(2).map(|w| Transition {
                            obs: w[0].obs.clone(),
                            action: w[0].action.clone(),
                            reward: w[0].reward,
                            next_obs: w[1].obs.clone(),
                        }));
                    }
                    if data.is_empty() {
                        return Err(Error::Config("qfit_episodes must yield at least one transition".into()));
                    }
                    (train_q_for_ppo(&b, &data, &self.cfg.qfit, self.seed(S_QFIT))?.0, log)
                }
            };
            let tail: Vec<f64> = log.episode_returns.iter().rev().take(10).copied().collect();
            save_model(&self.path(VICTIM), POLICY_KIND, &bundle, json!({ "algo": self.cfg.algo, "env": spec.name, "last_returns": tail }))?;
            std::fs::write(self.path(RESOLVED_CONFIG), self.cfg.to_toml()?)?;
            Ok(())
        })
    }

    /// Normal dataset plus a held-out clean set for threshold calibration.
    pub fn collect(&self) -> Result<StageReport> {
        counted(|| {
            let spec = self.cfg.env_spec()?;
            let victim = self.load_victim()?;
            collect_normal(&victim, &spec, self.cfg.normal_trajectories, self.cfg.seed)?.save(&self.path(NORMAL))?;
            let trajs = episode_seeds(self.cfg.seed, S_CALIBRATION, self.cfg.calibration_trajectories)
                .into_iter()
                .map(|s| env::rollout(&spec, &mut victim.actor(victim.deploy_mode()), &mut StepHooks::none(), s))
                .collect::<Result<Vec<_>>>()?;
            Dataset::from_trajectories(&trajs).save(&self.path(CALIBRATION))
        })
    }

    fn adversarial_pairs(&self, victim: &PolicyBundle, norm: &ObsNormalizer, sequences: &[Vec<Vec<f64>>], stream: u64) -> Result<Vec<AdvSequence>> {
        build_adv_dataset(sequences, victim, norm, &self.cfg.offline_attacks, &self.cfg.budget()?, &self.cfg.pgd, None, self.seed(stream))
    }

    /// Attack the stored normal dataset offline.
    pub fn augment(&self) -> Result<StageReport> {
        counted(|| {
            let victim = self.load_victim()?;
            let normal = self.load_normal()?;
            let norm = normal.stats.normalizer()?;
            let adv = self.adversarial_pairs(&victim, &norm, &normal.sequences(), S_AUGMENT)?;
            Dataset::from_adversarial(&adv, &normal)?.save(&self.path(ADVERSARIAL))
        })
    }

    fn load_adversarial(&self, normal: &Dataset) -> Result<Vec<AdvSequence>> {
        let ds = Dataset::load(&self.require(ADVERSARIAL)?)?;
        let clean = normal.sequences();
        let mut out: Vec<AdvSequence> = Vec::new();
        for r in &ds.records {
            if r.t == 0 {
                let source = r.traj_id;
                let seq = clean.get(source).ok_or_else(|| Error::Invalid(format!("adversarial record for unknown episode {source}")))?;
                let attack = self.cfg.offline_attacks[out.iter().filter(|a| a.source == source).count() % self.cfg.offline_attacks.len()];
                out.push(AdvSequence { source, attack, clean: seq.clone(), attacked: Vec::new(), flags: Vec::new() });
            }
            let cur = out.last_mut().ok_or_else(|| Error::Invalid("adversarial dataset does not start at t = 0".into()))?;
            if let Some(name) = &r.attack {
                cur.attack = name.parse()?;
            }
            cur.attacked.push(r.obs.clone());
            cur.flags.push(r.attacked);
        }
        Ok(out)
    }

    pub fn train_detector(&self) -> Result<StageReport> {
        counted(|| {
            let normal = self.load_normal()?;
            let norm = normal.stats.normalizer()?;
            let (det, rep) = crate::shield::train_detector(&normal.sequences(), &norm, &self.cfg.shield, self.seed(S_DETECTOR))?;
            save_model(&self.path(DETECTOR), VAE_KIND, &det, json!({ "role": "detector", "report": rep }))
        })
    }

    pub fn train_denoiser(&self) -> Result<StageReport> {
        counted(|| {
            let victim = self.load_victim()?;
            let normal = self.load_normal()?;
            let norm = normal.stats.normalizer()?;
            let adv = self.load_adversarial(&normal)?;
            let reg = if self.cfg.regularize { Regularizer::On { victim: &victim, budget: self.cfg.budget()? } } else { Regularizer::None };
            let (den, rep) = crate::shield::train_denoiser(&normal.sequences(), &adv, &norm, &self.cfg.shield, reg, self.seed(S_DENOISER))?;
            save_model(&self.path(DENOISER), VAE_KIND, &den, json!({ "role": "denoiser", "report": rep }))
        })
    }

    /// Detector threshold from held-out clean and offline-attacked scores,
    /// optional vulnerability gate, and the learned adversary.
    pub fn tune_thresholds(&self) -> Result<StageReport> {
        counted(|| {
            let spec = self.cfg.env_spec()?;
            let victim = self.load_victim()?;
            let norm = self.normalizer()?;
            let detector = self.load_detector()?;
            let denoiser = self.load_denoiser()?;
            let calib = self.load_calibration()?.sequences();
            if calib.is_empty() {
                return Err(Error::Config("calibration_trajectories must be positive".into()));
            }
            let adv = self.adversarial_pairs(&victim, &norm, &calib, S_CALIBRATION)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(S_SCORES));
            let mut clean_scores = Vec::new();
            for seq in &calib {
                clean_scores.extend(score_sequence(&detector, seq, self.cfg.latent_mode, &mut rng)?);
            }
            let mut attacked_scores = Vec::new();
            let mut heldout = Vec::new();
            for &kind in &self.cfg.offline_attacks {
                let (mut clean, mut den, mut att) = (Vec::new(), Vec::new(), Vec::new());
                for a in adv.iter().filter(|a| a.attack == kind) {
                    let scores = score_sequence(&detector, &a.attacked, self.cfg.latent_mode, &mut rng)?;
                    let out = denoiser.run(&a.attacked, LatentMode::Mean, &mut rng)?;
                    for t in 0..a.attacked.len() {
                        if perturbed(&a.attacked[t], &a.clean[t]) {
                            attacked_scores.push(scores[t]);
                            clean.push(a.clean[t].clone());
                            den.push(out[t].out.clone());
                            att.push(a.attacked[t].clone());
                        }
                    }
                }
                heldout.push(HeldoutMae { attack: kind, denoised: score_denoiser(&clean, &den, &norm)?, attacked: score_denoiser(&clean, &att, &norm)? });
            }
            let cal = if attacked_scores.is_empty() {
                // Nothing to detect: keep every clean step below the threshold.
                let top = clean_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let point = ThresholdPoint { threshold: top, fnr: 0.0, f1: 0.0, fpr: 0.0 };
                CalibrationReport { chosen: point, fnr_max: self.cfg.fnr_max, n_clean: clean_scores.len(), n_attacked: 0, admissible: true, candidates: Vec::new() }
            } else {
                tune_c_anomaly(&clean_scores, &attacked_scores, self.cfg.fnr_max)?
            };
            let c_vul = match self.cfg.vulnerability_max_frequency {
                Some(f) => Some(self.tune_vulnerability(&spec, &victim, &norm, f)?),
                None => None,
            };
            let th = Thresholds {
                c_anomaly: cal.chosen.threshold,
                calibration: cal.chosen,
                admissible: cal.admissible,
                n_clean: cal.n_clean,
                n_attacked: cal.n_attacked,
                c_vul,
                heldout,
            };
            write_json(&self.path(THRESHOLDS), &th)?;
            if self.cfg.attacks.contains(&AttackKind::Optimal) {
                let mut actor = victim.actor(victim.deploy_mode());
                let (adv, log) = train_optimal_adversary(&spec, &mut actor, None, &norm, self.cfg.budget()?, &self.cfg.adversary, self.seed(S_ADVERSARY))?;
                save_model(&self.path(ADVERSARY), POLICY_KIND, &adv, json!({ "role": "optimal_adversary", "episodes": log.episode_returns.len() }))?;
            }
            Ok(())
        })
    }

    fn tune_vulnerability(&self, spec: &EnvSpec, victim: &PolicyBundle, norm: &ObsNormalizer, max_frequency: f64) -> Result<f64> {
        let values: Vec<f64> = self.load_normal()?.records.iter().map(|r| victim.state_value(&r.obs)).collect::<Result<_>>()?;
        let candidates = quantiles(&values, &(0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>())?;
        let budget = self.cfg.budget()?;
        let kind = self.cfg.offline_attacks.first().copied().unwrap_or(AttackKind::Opposite);
        let search = VulSearch { max_frequency, episodes: self.cfg.vulnerability_episodes as u64, seed: self.seed(S_VUL) };
        let pgd = self.cfg.pgd.clone();
        let tuning = tune_c_vul(spec, victim, &values, &candidates, &search, &mut |gate| {
            let mut a = VictimAttacker::new(kind, victim, norm, budget);
            a.pgd = pgd.clone();
            AttackHook::new(Box::new(a), norm, budget, Some(gate))
        })?;
        Ok(tuning.c_vul)
    }

    fn load_all(&self) -> Result<Loaded> {
        let thresholds = self.load_thresholds()?;
        let adversary = if self.cfg.attacks.contains(&AttackKind::Optimal) {
            Some(load_model(&self.require(ADVERSARY)?, POLICY_KIND)?)
        } else {
            None
        };
        Ok(Loaded {
            spec: self.cfg.env_spec()?,
            victim: self.load_victim()?,
            norm: self.normalizer()?,
            detector: self.load_detector()?,
            denoiser: self.load_denoiser()?,
            thresholds,
            adversary,
        })
    }

    /// Rollout matrix {clean, attacks} x {undefended, defended}.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let l = self.load_all()?;
        let defense = DefendedPolicy::new(&l.victim, &l.detector, l.thresholds.c_anomaly, &l.denoiser, self.cfg.latent_mode)?;
        let ctx = EvalCtx { cfg: &self.cfg, l: &l, defense, adaptive_adversary: None };
        let seeds = episode_seeds(self.cfg.seed, S_EVAL, self.cfg.rollouts);
        let mut cells = vec![(CellKind::Clean, false), (CellKind::Clean, true)];
        for &k in &self.cfg.attacks {
            cells.push((CellKind::Attack(k), false));
            cells.push((CellKind::Attack(k), true));
        }
        let runs = ctx.run_cells(&cells, &seeds)?;
        let report = build_report(&self.cfg, &l, &cells, &seeds, &runs)?;
        write_json(&self.metrics_path(), &report)?;
        Ok(report)
    }

    /// Defense-aware attacks against the defended victim; fills the adaptive table.
    pub fn adaptive_eval(&self) -> Result<MetricsReport> {
        let l = self.load_all()?;
        let mut report = self.load_metrics()?;
        let defense = DefendedPolicy::new(&l.victim, &l.detector, l.thresholds.c_anomaly, &l.denoiser, self.cfg.latent_mode)?;
        let adaptive_adversary = if self.cfg.attacks.contains(&AttackKind::Optimal) {
            let (adv, log) = adaptive_optimal(&defense, &l.spec, &l.norm, self.cfg.budget()?, &self.cfg.adversary, self.seed(S_ADAPTIVE))?;
            save_model(&self.path(ADAPTIVE_ADVERSARY), POLICY_KIND, &adv, json!({ "role": "adaptive_optimal_adversary", "episodes": log.episode_returns.len() }))?;
            Some(adv)
        } else {
            None
        };
        let ctx = EvalCtx { cfg: &self.cfg, l: &l, defense, adaptive_adversary: adaptive_adversary.as_ref() };
        let seeds = episode_seeds(self.cfg.seed, S_EVAL, self.cfg.rollouts);
        let cells: Vec<(CellKind, bool)> = self.cfg.attacks.iter().map(|&k| (CellKind::Adaptive(k), true)).collect();
        let runs = ctx.run_cells(&cells, &seeds)?;
        report.adaptive.clear();
        for ((cell, _), trajs) in cells.iter().zip(&runs) {
            let CellKind::Adaptive(kind) = *cell else { unreachable!("only adaptive cells") };
            let row = report
                .attacks
                .iter()
                .find(|r| r.attack == kind)
                .ok_or_else(|| Error::Config(format!("metrics have no {kind} row; rerun evaluate with the same attacks")))?;
            let adaptive = cell_stats(&seeds, trajs)?;
            let change = if row.defended.mean == 0.0 {
                Metric::undefined("defended return is zero")
            } else {
                Metric::Value(reward_change(adaptive.mean, row.defended.mean))
            };
            report.adaptive.push(AdaptiveRow { attack: kind, defended: row.defended.mean, adaptive, change, max_perturbation: max_perturbation(&l.norm, trajs) });
        }
        write_json(&self.metrics_path(), &report)?;
        Ok(report)
    }

    /// Every stage in order, ending with the adaptive table.
    pub fn run_all(&self) -> Result<MetricsReport> {
        self.train_policy()?;
        self.collect()?;
        self.augment()?;
        self.train_detector()?;
        self.train_denoiser()?;
        self.tune_thresholds()?;
        self.evaluate()?;
        self.adaptive_eval()
    }
}

fn perturbed(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(x, y)| (x - y).abs() > PERTURBED_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CellKind {
    Clean,
    Attack(AttackKind),
    Adaptive(AttackKind),
}

struct EvalCtx<'a> {
    cfg: &'a ExperimentConfig,
    l: &'a Loaded,
    defense: DefendedPolicy<'a>,
    adaptive_adversary: Option<&'a PolicyBundle>,
}

impl EvalCtx<'_> {
    fn rollout(&self, cell: CellKind, defended: bool, seed: u64) -> Result<Trajectory> {
        let l = self.l;
        let budget = self.cfg.budget()?;
        let gate = l.thresholds.c_vul.map(|c_vul| VulnerabilityIndicator { bundle: &l.victim, c_vul });
        let mut hooks = StepHooks::none();
        match cell {
            CellKind::Clean => {}
            CellKind::Attack(kind) => {
                let mut a = VictimAttacker::new(kind, &l.victim, &l.norm, budget);
                a.pgd = self.cfg.pgd.clone();
                a.cem = self.cfg.cem.clone();
                a.adversary = l.adversary.as_ref();
                hooks.push(Box::new(AttackHook::new(Box::new(a), &l.norm, budget, gate)));
            }
            CellKind::Adaptive(kind) => {
                let mut a = AdaptiveAttacker::new(kind, self.defense, &l.norm, budget, self.cfg.adaptive.clone());
                if let Some(adv) = self.adaptive_adversary {
                    a = a.with_adversary(adv);
                }
                hooks.push(Box::new(AttackHook::new(Box::new(a), &l.norm, budget, gate)));
            }
        }
        if defended {
            hooks.push(Box::new(self.defense.hook()));
        }
        env::rollout(&l.spec, &mut l.victim.actor(l.victim.deploy_mode()), &mut hooks, seed)
    }

    /// Trajectories per cell, in seed order; rollouts fan out over workers.
    fn run_cells(&self, cells: &[(CellKind, bool)], seeds: &[u64]) -> Result<Vec<Vec<Trajectory>>> {
        let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers).build().map_err(|e| Error::Config(e.to_string()))?;
        let trajs: Vec<Trajectory> = pool.install(|| jobs.par_iter().map(|&(c, s)| self.rollout(cells[c].0, cells[c].1, s)).collect::<Result<_>>())?;
        let mut out: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(seeds.len()); cells.len()];
        for ((c, _), t) in jobs.into_iter().zip(trajs) {
            out[c].push(t);
        }
        Ok(out)
    }
}

fn cell_stats(seeds: &[u64], trajs: &[Trajectory]) -> Result<CellStats> {
    CellStats::new(seeds.to_vec(), trajs.iter().map(Trajectory::undiscounted_return).collect())
}

fn max_perturbation(norm: &ObsNormalizer, trajs: &[Trajectory]) -> f64 {
    trajs.iter().flat_map(|t| &t.steps).map(|s| AttackBudget::distance(norm, &s.perceived, &s.obs)).fold(0.0, f64::max)
}

/// Step labels (effective perturbation) and verdicts of defended rollouts.
fn labels_and_verdicts(trajs: &[Trajectory]) -> (Vec<bool>, Vec<bool>) {
    trajs
        .iter()
        .flat_map(|t| &t.steps)
        .map(|s| (s.attacked && perturbed(&s.perceived, &s.obs), s.verdict.unwrap_or(false)))
        .unzip()
}

fn build_report(cfg: &ExperimentConfig, l: &Loaded, cells: &[(CellKind, bool)], seeds: &[u64], runs: &[Vec<Trajectory>]) -> Result<MetricsReport> {
    let find = |kind: CellKind, defended: bool| -> &[Trajectory] {
        let i = cells.iter().position(|&c| c == (kind, defended)).expect("cell scheduled");
        &runs[i]
    };
    let clean_u = find(CellKind::Clean, false);
    let clean_d = find(CellKind::Clean, true);
    let undefended = cell_stats(seeds, clean_u)?;
    let defended = cell_stats(seeds, clean_d)?;
    let retention = Metric::ratio(defended.mean, undefended.mean, "undefended clean return is zero");
    let (clean_labels, clean_verdicts) = labels_and_verdicts(clean_d);
    let clean_scores = score_detector(&clean_labels, &clean_verdicts)?;

    let mut attacks = Vec::new();
    let mut det_rows = Vec::new();
    let mut den_rows = Vec::new();
    let score_of = |trajs: &[Trajectory]| -> Vec<f64> { trajs.iter().flat_map(|t| &t.steps).filter_map(|s| s.score).collect() };
    let mut histos = vec![("clean".to_string(), score_of(clean_d))];
    for &kind in &cfg.attacks {
        let (u, d) = (find(CellKind::Attack(kind), false), find(CellKind::Attack(kind), true));
        attacks.push(AttackRow {
            attack: kind,
            undefended: cell_stats(seeds, u)?,
            defended: cell_stats(seeds, d)?,
            attack_frequency: u.iter().map(Trajectory::attack_frequency).sum::<f64>() / u.len() as f64,
            max_perturbation: max_perturbation(&l.norm, u).max(max_perturbation(&l.norm, d)),
        });
        let (mut labels, mut verdicts) = labels_and_verdicts(d);
        labels.extend(&clean_labels);
        verdicts.extend(&clean_verdicts);
        let s = score_detector(&labels, &verdicts)?;
        det_rows.push(DetectorRow { attack: kind, f1: s.f1, fnr: s.fnr, confusion: s.confusion });
        let (mut clean, mut den, mut att) = (Vec::new(), Vec::new(), Vec::new());
        for s in d.iter().flat_map(|t| &t.steps).filter(|s| s.attacked && perturbed(&s.perceived, &s.obs)) {
            clean.push(s.obs.clone());
            den.push(s.denoised.clone().ok_or_else(|| Error::Invalid("defended step without denoiser output".into()))?);
            att.push(s.perceived.clone());
        }
        let held = l.thresholds.heldout.iter().find(|h| h.attack == kind);
        den_rows.push(DenoiserRow {
            attack: kind,
            mae: score_denoiser(&clean, &den, &l.norm)?,
            attacked_mae: score_denoiser(&clean, &att, &l.norm)?,
            heldout_mae: held.map_or_else(|| Metric::undefined("online-only attack"), |h| h.denoised.clone()),
            heldout_attacked_mae: held.map_or_else(|| Metric::undefined("online-only attack"), |h| h.attacked.clone()),
        });
        histos.push((kind.to_string(), score_of(d)));
    }
    let hi = histos.iter().flat_map(|(_, s)| s).copied().fold(0.0, f64::max);
    let spec = &l.spec;
    Ok(MetricsReport {
        header: ReportHeader {
            env: spec.name.as_str().to_string(),
            algo: cfg.algo.to_string(),
            epsilon: cfg.epsilon,
            horizon: spec.horizon,
            normal_trajectories: cfg.normal_trajectories,
            rollouts: cfg.rollouts,
            seed: cfg.seed,
            reference_trajectories: REFERENCE_TRAJECTORIES,
            reference_horizon: REFERENCE_HORIZON,
            c_anomaly: l.thresholds.c_anomaly,
            c_vul: l.thresholds.c_vul,
            latent_mode: Some(cfg.latent_mode),
        },
        clean: Some(CleanRow { undefended, defended, retention }),
        summary: Summary::from_rows(&attacks),
        attacks,
        detector: DetectorTable { accuracy_clean: clean_scores.accuracy_clean, per_attack: det_rows },
        denoiser: den_rows,
        adaptive: Vec::new(),
        score_histograms: histos.iter().map(|(c, s)| ScoreHistogram::new(c, s, hi, 20)).collect(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
