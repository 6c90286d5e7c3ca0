//! Detector and denoiser training on windowed observation sequences.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::defense::DenoisedStep;
use super::vae::{elbo_loss, GruVae};
use crate::attack::{opposite_batch, ActionMetric, AdvSequence, AttackBudget, DiffPolicy, ObsNormalizer, PgdConfig};
use crate::diff::{collect_grads, Adam, AdamConfig, Graph, Parameterized};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;
use crate::policy::PolicyBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShieldConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub lr: f64,
    /// Windows per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Truncation length; each window starts from a zero hidden state.
    pub window: usize,
    pub holdout_frac: f64,
    pub clip_norm: f64,
    /// Weight of the robustness regulariser when enabled.
    pub reg_weight: f64,
    /// Probe rows per minibatch for the regulariser.
    pub reg_probes: usize,
    /// Inner attack used by the regulariser.
    pub reg_pgd: PgdConfig,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            latent_dim: 64,
            lr: 1e-3,
            batch_size: 128,
            epochs: 50,
            window: 64,
            holdout_frac: 0.1,
            clip_norm: 5.0,
            reg_weight: 1.0,
            reg_probes: 16,
            reg_pgd: PgdConfig { steps: 5, ..PgdConfig::default() },
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("shield sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) || !(self.lr > 0.0) || self.reg_weight < 0.0 {
            return Err(Error::Config("shield holdout_frac, lr or reg_weight out of range".into()));
        }
        self.reg_pgd.validate()
    }
}

/// Robustness regulariser applied while training the denoiser.
#[derive(Debug, Clone, Copy)]
pub enum Regularizer<'a> {
    None,
    /// Penalise how far an opposite attack on `policy ∘ denoiser` moves the action.
    On { victim: &'a PolicyBundle, budget: AttackBudget },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShieldTrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean regulariser value per epoch (empty when disabled).
    pub epoch_reg: Vec<f64>,
    /// Mean-latent ELBO over held-out sequences.
    pub heldout_loss: f64,
    pub train_windows: usize,
    pub heldout_sequences: usize,
}

/// Input and target rows in normalised units.
struct Window {
    input: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

fn windows(norm: &ObsNormalizer, input: &[Vec<f64>], target: &[Vec<f64>], w: usize, out: &mut Vec<Window>) {
    let n = input.len();
    let mut starts: Vec<usize> = (0..n.saturating_sub(w) + 1).step_by(w).collect();
    if n > w && !(n - w).is_multiple_of(w) {
        starts.push(n - w);
    }
    for s in starts {
        let e = (s + w).min(n);
        out.push(Window {
            input: input[s..e].iter().map(|o| norm.normalize(o)).collect(),
            target: target[s..e].iter().map(|o| norm.normalize(o)).collect(),
        });
    }
}

/// Fit a model mapping each input sequence onto its target sequence.
fn fit(
    pairs: &[(&[Vec<f64>], &[Vec<f64>])],
    norm: &ObsNormalizer,
    cfg: &ShieldConfig,
    reg: Regularizer<'_>,
    seed: u64,
) -> Result<(GruVae, ShieldTrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("shield training sequences"));
    }
    for (x, y) in pairs {
        check_dim("sequence pair length", x.len(), y.len())?;
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        for (a, b) in x.iter().zip(y.iter()) {
            check_dim("shield obs", norm.dim(), a.len())?;
            check_dim("shield obs", norm.dim(), b.len())?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GruVae::new(&mut rng, norm.clone(), cfg.hidden_dim, cfg.latent_dim);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if pairs.len() >= 2 { ((pairs.len() as f64 * cfg.holdout_frac).round() as usize).min(pairs.len() - 1) } else { 0 };
    let (held, train) = order.split_at(n_hold);
    let mut wins = Vec::new();
    for &i in train {
        windows(norm, pairs[i].0, pairs[i].1, cfg.window, &mut wins);
    }
    // Equal-length windows batch together.
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, w) in wins.iter().enumerate() {
        by_len.entry(w.input.len()).or_default().push(i);
    }
    let mut opt = Adam::new(AdamConfig { clip_norm: Some(cfg.clip_norm), ..AdamConfig::with_lr(cfg.lr) });
    let mut report = ShieldTrainReport { train_windows: wins.len(), heldout_sequences: held.len(), ..Default::default() };
    let metric = match reg {
        Regularizer::On { victim, .. } => Some(ActionMetric::for_bundle(victim)),
        Regularizer::None => None,
    };

    for epoch in 0..cfg.epochs {
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idx in by_len.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        let (mut loss_sum, mut reg_sum) = (0.0, 0.0);
        for batch in &batches {
            let len = wins[batch[0]].input.len();
            let b = batch.len();
            let stack = |f: &dyn Fn(&Window) -> &Vec<Vec<f64>>, t: usize| Mat::from_rows(&batch.iter().map(|&i| f(&wins[i])[t].clone()).collect::<Vec<_>>());
            let inputs: Vec<Mat<f64>> = (0..len).map(|t| stack(&|w| &w.input, t)).collect();
            let targets: Vec<Mat<f64>> = (0..len).map(|t| stack(&|w| &w.target, t)).collect();
            let noise: Vec<Mat<f64>> = (0..len)
                .map(|_| Mat::from_vec(b, cfg.latent_dim, (0..b * cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect()))
                .collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let (elbo, steps) = model.sequence_loss_graph(&mut g, &vars, &inputs, &targets, Some(&noise))?;
            let mut loss = elbo;
            if let (Regularizer::On { victim, budget }, Some(metric)) = (reg, &metric) {
                let probes = cfg.reg_probes.min(b);
                if probes > 0 && cfg.reg_weight > 0.0 {
                    let ts: Vec<usize> = (0..probes).map(|_| rng.gen_range(0..len)).collect();
                    let hidden = |which: fn(&super::vae::StepVars) -> crate::diff::Var| {
                        let rows: Vec<Vec<f64>> = (0..probes)
                            .map(|p| if ts[p] == 0 { vec![0.0; cfg.hidden_dim] } else { g.value(which(&steps[ts[p] - 1])).row(p).to_vec() })
                            .collect();
                        Mat::from_rows(&rows)
                    };
                    let h_enc = hidden(|s| s.h_enc);
                    let h_dec = hidden(|s| s.h_dec);
                    let clean_raw = Mat::from_rows(&(0..probes).map(|p| norm.denormalize(targets[ts[p]].row(p))).collect::<Vec<_>>());
                    let attacked = {
                        let den = DenoisedStep { vae: &model, victim, h_enc: h_enc.clone(), h_dec: h_dec.clone(), noise: None };
                        opposite_batch(&den, metric, norm, &clean_raw, &budget, &cfg.reg_pgd, &mut rng)?.obs_hat
                    };
                    let r = regularizer_graph(&mut g, &vars, &model, victim, metric, &h_enc, &h_dec, &clean_raw, &attacked);
                    reg_sum += g.value(r).item();
                    let rw = g.scale(r, cfg.reg_weight);
                    loss = g.add(loss, rw);
                }
            }
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("shield loss {lv} at epoch {epoch}")));
            }
            loss_sum += g.value(elbo).item();
            let grads = g.backward(loss)?;
            let grads = collect_grads(&model, &vars, &grads);
            opt.step(&mut model, grads)?;
        }
        let nb = batches.len().max(1) as f64;
        report.epoch_loss.push(loss_sum / nb);
        if metric.is_some() {
            report.epoch_reg.push(reg_sum / nb);
        }
        debug!("shield epoch {epoch}: loss {:.4}", loss_sum / nb);
    }
    report.heldout_loss = if held.is_empty() {
        f64::NAN
    } else {
        held.iter().map(|&i| elbo_loss(&model, pairs[i].0, pairs[i].1, None)).sum::<Result<f64>>()? / held.len() as f64
    };
    Ok((model, report))
}

/// Mean action distance between `policy ∘ denoiser` on clean and attacked
/// rows, with the denoiser parameters on the graph as `vars`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn regularizer_graph(
    g: &mut Graph<f64>,
    vars: &[crate::diff::Var],
    model: &GruVae,
    victim: &PolicyBundle,
    metric: &ActionMetric,
    h_enc: &Mat<f64>,
    h_dec: &Mat<f64>,
    clean_raw: &Mat<f64>,
    attacked_raw: &Mat<f64>,
) -> crate::diff::Var {
    let he = g.constant(h_enc.clone());
    let hd = g.constant(h_dec.clone());
    let inv: Vec<f64> = model.norm.std.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = model.norm.mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
    let act = |raw: &Mat<f64>, g: &mut Graph<f64>| {
        let r = g.constant(raw.clone());
        let x = g.affine_cols(r, &inv, &shift);
        let s = model.step_graph(g, vars, x, he, hd, None);
        let o = model.norm.denormalize_graph(g, s.out);
        victim.action_graph(g, o)
    };
    let a_clean = act(clean_raw, g);
    let a_hat = act(attacked_raw, g);
    let d = g.sub(a_hat, a_clean);
    let m = metric.graph(g, d);
    g.mean(m)
}

/// Autoencode clean sequences.
pub fn train_detector(normal: &[Vec<Vec<f64>>], norm: &ObsNormalizer, cfg: &ShieldConfig, seed: u64) -> Result<(GruVae, ShieldTrainReport)> {
    let pairs: Vec<(&[Vec<f64>], &[Vec<f64>])> = normal.iter().map(|s| (s.as_slice(), s.as_slice())).collect();
    fit(&pairs, norm, cfg, Regularizer::None, seed)
}

/// Map attacked sequences back to their clean versions; clean sequences are
/// included as identity pairs.
pub fn train_denoiser(
    normal: &[Vec<Vec<f64>>],
    adv: &[AdvSequence],
    norm: &ObsNormalizer,
    cfg: &ShieldConfig,
    reg: Regularizer<'_>,
    seed: u64,
) -> Result<(GruVae, ShieldTrainReport)> {
    let mut pairs: Vec<(&[Vec<f64>], &[Vec<f64>])> = normal.iter().map(|s| (s.as_slice(), s.as_slice())).collect();
    for a in adv {
        check_dim("adversarial pair length", a.clean.len(), a.attacked.len())?;
        pairs.push((a.attacked.as_slice(), a.clean.as_slice()));
    }
    fit(&pairs, norm, cfg, reg, seed)
}
