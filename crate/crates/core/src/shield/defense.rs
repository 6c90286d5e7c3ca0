//! Anomaly detection, threshold calibration and the defended policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vae::{GruVae, LatentMode, VaeState};
use crate::attack::{opposite_batch, ActionMetric, AttackBudget, DiffPolicy, PgdConfig};
use crate::diff::{Graph, Parameterized, Var};
use crate::env::{HookContext, HookStage, ObsHook, PolicyAdapter, StepNotes};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;
use crate::policy::{ActMode, PolicyBundle};

/// `policy ∘ denoiser` for one step from fixed recurrent states, one row per state.
pub struct DenoisedStep<'a> {
    pub vae: &'a GruVae,
    pub victim: &'a PolicyBundle,
    pub h_enc: Mat<f64>,
    pub h_dec: Mat<f64>,
    /// Latent noise rows; `None` uses the posterior mean.
    pub noise: Option<Mat<f64>>,
}

impl<'a> DenoisedStep<'a> {
    pub fn from_state(vae: &'a GruVae, victim: &'a PolicyBundle, state: &VaeState) -> Self {
        Self { vae, victim, h_enc: Mat::row_vec(&state.h_enc), h_dec: Mat::row_vec(&state.h_dec), noise: None }
    }

    /// Raw denoised observation rows on the graph.
    pub fn denoise_graph(&self, g: &mut Graph<f64>, obs: Var) -> Var {
        let vars = self.vae.bind(g, false);
        let inv: Vec<f64> = self.vae.norm.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.vae.norm.mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
        let x = g.affine_cols(obs, &inv, &shift);
        let he = g.constant(self.h_enc.clone());
        let hd = g.constant(self.h_dec.clone());
        let nv = self.noise.as_ref().map(|n| g.constant(n.clone()));
        let s = self.vae.step_graph(g, &vars, x, he, hd, nv);
        self.vae.norm.denormalize_graph(g, s.out)
    }
}

impl DiffPolicy for DenoisedStep<'_> {
    fn obs_dim(&self) -> usize {
        self.vae.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.victim.action_dim
    }
    fn action_graph(&self, g: &mut Graph<f64>, obs: Var) -> Var {
        let o = self.denoise_graph(g, obs);
        self.victim.action_graph(g, o)
    }
}

/// `metric(pi(den(o_hat)) - pi(den(o)))` where `o_hat` is an opposite attack on
/// `pi ∘ den` around `o`, from denoiser state `state`.
pub fn robustness_regularizer(
    victim: &PolicyBundle,
    denoiser: &GruVae,
    state: &VaeState,
    obs: &[f64],
    budget: &AttackBudget,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_dim("regularizer obs", denoiser.obs_dim, obs.len())?;
    let den = DenoisedStep::from_state(denoiser, victim, state);
    let out = opposite_batch(&den, &ActionMetric::for_bundle(victim), &denoiser.norm, &Mat::row_vec(obs), budget, cfg, rng)?;
    Ok(out.value[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    /// ℓ∞ distance between input and reconstruction, in normalised units.
    pub score: f64,
    pub is_anomaly: bool,
    pub threshold: f64,
}

/// Advance the detector by one observation and score it.
pub fn detect(detector: &GruVae, obs: &[f64], state: &mut VaeState, c_anomaly: f64, noise: Option<&[f64]>) -> Result<AnomalyVerdict> {
    let s = detector.step(obs, state, noise)?;
    let x = detector.norm.normalize(obs);
    let score = x.iter().zip(&s.out_norm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(AnomalyVerdict { score, is_anomaly: score > c_anomaly, threshold: c_anomaly })
}

/// Per-step detector scores over one sequence from the zero state.
pub fn score_sequence(detector: &GruVae, seq: &[Vec<f64>], mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut st = detector.initial_state();
    seq.iter()
        .map(|o| {
            let noise = detector.draw_noise(mode, rng);
            Ok(detect(detector, o, &mut st, f64::INFINITY, noise.as_deref())?.score)
        })
        .collect()
}

/// One threshold candidate with its confusion-derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub fnr: f64,
    pub f1: f64,
    /// Fraction of clean samples flagged.
    pub fpr: f64,
}

/// Outcome of the anomaly-threshold search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub chosen: ThresholdPoint,
    pub fnr_max: f64,
    pub n_clean: usize,
    pub n_attacked: usize,
    pub admissible: bool,
    pub candidates: Vec<ThresholdPoint>,
}

/// Rates for flagging `score > threshold`.
pub fn threshold_point(clean: &[f64], attacked: &[f64], threshold: f64) -> ThresholdPoint {
    let tp = attacked.iter().filter(|&&s| s > threshold).count() as f64;
    let fp = clean.iter().filter(|&&s| s > threshold).count() as f64;
    let fn_ = attacked.len() as f64 - tp;
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    ThresholdPoint { threshold, fnr: fn_ / attacked.len() as f64, f1, fpr: fp / clean.len().max(1) as f64 }
}

/// Linear search over every empirical score quantile (each distinct score,
/// plus one value below all of them). Among thresholds with
/// `FNR <= fnr_max`, take the highest F1, then the lower FNR, then the higher
/// threshold. When nothing qualifies, take the lowest FNR.
pub fn tune_c_anomaly(clean: &[f64], attacked: &[f64], fnr_max: f64) -> Result<CalibrationReport> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset("clean scores"));
    }
    if attacked.is_empty() {
        return Err(Error::EmptyDataset("attacked scores"));
    }
    if clean.iter().chain(attacked).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("detector scores".into()));
    }
    // Sweep thresholds upward over labelled scores.
    let mut all: Vec<(f64, bool)> = clean.iter().map(|&s| (s, false)).chain(attacked.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_pos, n_neg) = (attacked.len() as f64, clean.len() as f64);
    let mut candidates = Vec::new();
    let point = |t: f64, below_pos: f64, below_neg: f64| {
        let tp = n_pos - below_pos;
        let fp = n_neg - below_neg;
        let fn_ = below_pos;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        ThresholdPoint { threshold: t, fnr: fn_ / n_pos, f1, fpr: fp / n_neg }
    };
    candidates.push(point(all[0].0 - 1.0, 0.0, 0.0));
    let (mut below_pos, mut below_neg) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                below_pos += 1.0;
            } else {
                below_neg += 1.0;
            }
            i += 1;
        }
        candidates.push(point(t, below_pos, below_neg));
    }
    let better = |a: &ThresholdPoint, b: &ThresholdPoint| {
        a.f1.total_cmp(&b.f1).then(b.fnr.total_cmp(&a.fnr)).then(a.threshold.total_cmp(&b.threshold))
    };
    let admissible: Vec<&ThresholdPoint> = candidates.iter().filter(|c| c.fnr <= fnr_max).collect();
    let (chosen, ok) = if admissible.is_empty() {
        let c = candidates
            .iter()
            .max_by(|a, b| b.fnr.total_cmp(&a.fnr).then(better(a, b)))
            .expect("non-empty");
        (*c, false)
    } else {
        (**admissible.iter().max_by(|a, b| better(a, b)).expect("non-empty"), true)
    };
    Ok(CalibrationReport { chosen, fnr_max, n_clean: clean.len(), n_attacked: attacked.len(), admissible: ok, candidates })
}

/// Victim plus detector and denoiser. The victim's parameters are only read.
#[derive(Debug, Clone, Copy)]
pub struct DefendedPolicy<'a> {
    pub victim: &'a PolicyBundle,
    pub detector: &'a GruVae,
    pub c_anomaly: f64,
    pub denoiser: &'a GruVae,
    pub latent: LatentMode,
    pub act_mode: ActMode,
}

/// Independent per-episode recurrent states of the two models.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseState {
    pub detector: VaeState,
    pub denoiser: VaeState,
}

/// What the defense did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseStep {
    pub verdict: AnomalyVerdict,
    pub denoised: Vec<f64>,
    /// Observation handed to the victim.
    pub used: Vec<f64>,
}

impl<'a> DefendedPolicy<'a> {
    pub fn new(victim: &'a PolicyBundle, detector: &'a GruVae, c_anomaly: f64, denoiser: &'a GruVae, latent: LatentMode) -> Result<Self> {
        check_dim("detector obs_dim", victim.obs_dim, detector.obs_dim)?;
        check_dim("denoiser obs_dim", victim.obs_dim, denoiser.obs_dim)?;
        Ok(Self { victim, detector, c_anomaly, denoiser, latent, act_mode: victim.deploy_mode() })
    }

    pub fn initial_state(&self) -> DefenseState {
        DefenseState { detector: self.detector.initial_state(), denoiser: self.denoiser.initial_state() }
    }

    /// Both models consume the raw observation every step; the denoised
    /// observation replaces it only when the detector fires.
    pub fn filter(&self, obs: &[f64], state: &mut DefenseState, rng: &mut ChaCha8Rng) -> Result<DefenseStep> {
        let n_det = self.detector.draw_noise(self.latent, rng);
        let verdict = detect(self.detector, obs, &mut state.detector, self.c_anomaly, n_det.as_deref())?;
        let n_den = self.denoiser.draw_noise(self.latent, rng);
        let denoised = self.denoiser.step(obs, &mut state.denoiser, n_den.as_deref())?.out;
        let used = if verdict.is_anomaly { denoised.clone() } else { obs.to_vec() };
        Ok(DefenseStep { verdict, denoised, used })
    }

    /// Defended action, verdict and the observation the victim acted on.
    pub fn act(&self, obs: &[f64], state: &mut DefenseState, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, AnomalyVerdict, Vec<f64>)> {
        let step = self.filter(obs, state, rng)?;
        let action = self.victim.act(&step.used, self.act_mode, rng)?.sampled_action;
        Ok((action, step.verdict, step.used))
    }

    pub fn hook(&self) -> DefenseHook<'a> {
        DefenseHook { policy: *self, state: self.initial_state(), rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

/// Defense-stage rollout hook.
pub struct DefenseHook<'a> {
    pub policy: DefendedPolicy<'a>,
    state: DefenseState,
    rng: ChaCha8Rng,
}

impl ObsHook for DefenseHook<'_> {
    fn stage(&self) -> HookStage {
        HookStage::Defense
    }
    fn reset(&mut self, seed: u64) {
        self.state = self.policy.initial_state();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
    fn apply(&mut self, _ctx: &HookContext<'_>, obs: Vec<f64>, notes: &mut StepNotes) -> Result<Vec<f64>> {
        let step = self.policy.filter(&obs, &mut self.state, &mut self.rng)?;
        notes.verdict = Some(step.verdict.is_anomaly);
        notes.score = Some(step.verdict.score);
        notes.denoised = Some(step.denoised);
        Ok(step.used)
    }
}

/// Defended policy as a plain actor, with its own defense randomness.
pub struct DefendedActor<'a> {
    pub hook: DefenseHook<'a>,
    episode: u64,
}

impl<'a> DefendedActor<'a> {
    pub fn new(policy: DefendedPolicy<'a>) -> Self {
        Self { hook: policy.hook(), episode: 0 }
    }
}

impl PolicyAdapter for DefendedActor<'_> {
    fn obs_dim(&self) -> usize {
        self.hook.policy.victim.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.hook.policy.victim.action_dim
    }
    fn reset(&mut self) {
        self.episode += 1;
        self.hook.reset(self.episode);
    }
    fn act(&mut self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let step = self.hook.policy.filter(obs, &mut self.hook.state, &mut self.hook.rng)?;
        Ok(self.hook.policy.victim.act(&step.used, self.hook.policy.act_mode, rng)?.sampled_action)
    }
}
