//! Clipped-surrogate policy optimisation with a constant diagonal covariance.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{layer_sizes, Algo, PolicyBundle, ValueNet};
use super::TrainLog;
use crate::diff::dist::{diag_gaussian_log_prob, log_prob_graph};
use crate::diff::{collect_grads, Adam, AdamConfig, Graph, Mlp, Parameterized};
use crate::env::{EnvSpec, EnvTask, Task};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub total_steps: usize,
    /// Environment steps per update round.
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Constant action std as a fraction of the half action range.
    pub sigma_frac: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            rollout_steps: 2_000,
            epochs: 10,
            minibatch: 64,
            clip: 0.2,
            gae_lambda: 0.95,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            sigma_frac: 0.3,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
        }
    }
}

/// Generalised advantage estimates and value targets.
///
/// `next_values[t]` is `V(o_{t+1})`; `episode_end[t]` cuts the recursion
/// between episodes. Time limits are not terminal, so the last step of an
/// episode still bootstraps from `next_values`.
pub fn gae(rewards: &[f64], values: &[f64], next_values: &[f64], episode_end: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut run = 0.0;
    for t in (0..n).rev() {
        if episode_end[t] {
            run = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        run = delta + gamma * lambda * run;
        adv[t] = run;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift and scale to zero mean, unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / sd;
    }
}

pub fn train_ppo(spec: &EnvSpec, cfg: &PpoConfig, seed: u64) -> Result<(PolicyBundle, TrainLog)> {
    spec.validate()?;
    train_ppo_on(&mut EnvTask::new(spec.clone()), cfg, seed)
}

pub fn train_ppo_on(task: &mut dyn Task, cfg: &PpoConfig, seed: u64) -> Result<(PolicyBundle, TrainLog)> {
    if cfg.rollout_steps == 0 || cfg.minibatch == 0 || !(cfg.sigma_frac > 0.0) {
        return Err(Error::Config("ppo rollout_steps, minibatch and sigma_frac must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (od, ad) = (task.obs_dim(), task.action_dim());
    let low = task.action_low().to_vec();
    let high = task.action_high().to_vec();
    let gamma = task.gamma();
    let sigma: Vec<f64> = low.iter().zip(&high).map(|(l, h)| cfg.sigma_frac * 0.5 * (h - l)).collect();
    let mut bundle = PolicyBundle {
        algo: Algo::Ppo,
        obs_dim: od,
        action_dim: ad,
        action_low: low,
        action_high: high,
        policy: Mlp::new(&mut rng, "pi", &layer_sizes(od, &cfg.hidden, ad), 0.1),
        q: None,
        v: Some(ValueNet::new(&mut rng, "v", od, &cfg.hidden, 1.0 / (1.0 - gamma))),
        sigma: Some(sigma.clone()),
    };
    let clip_cfg = |lr| AdamConfig { clip_norm: Some(cfg.max_grad_norm), ..AdamConfig::with_lr(lr) };
    let mut pi_opt = Adam::new(clip_cfg(cfg.policy_lr));
    let mut v_opt = Adam::new(clip_cfg(cfg.value_lr));
    let mut log = TrainLog::default();

    let mut episode = 0u64;
    let mut obs = task.reset(seed.wrapping_add(episode))?;
    let mut ep_ret = 0.0;
    let rounds = cfg.total_steps.div_ceil(cfg.rollout_steps);
    for round in 0..rounds {
        let n = cfg.rollout_steps;
        let mut o_buf = Vec::with_capacity(n * od);
        let mut a_buf = Vec::with_capacity(n * ad);
        let mut logp_old = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut ends = Vec::with_capacity(n);
        let mut next_o_buf = Vec::with_capacity(n * od);
        for _ in 0..n {
            let mean = bundle.mean_action(&obs)?;
            let a: Vec<f64> = mean.iter().zip(&sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
            logp_old.push(diag_gaussian_log_prob(&a, &mean, &sigma));
            let (next, r, done) = task.step(&a)?;
            o_buf.extend_from_slice(&obs);
            a_buf.extend_from_slice(&a);
            next_o_buf.extend_from_slice(&next);
            rewards.push(r);
            ep_ret += r;
            ends.push(done);
            obs = next;
            if done {
                log.episode_returns.push(ep_ret);
                ep_ret = 0.0;
                episode += 1;
                obs = task.reset(seed.wrapping_add(episode))?;
            }
        }
        let o_mat = Mat::from_vec(n, od, o_buf);
        let a_mat = Mat::from_vec(n, ad, a_buf);
        let v = bundle.v.as_ref().expect("ppo has V");
        let values = v.value_batch(&o_mat)?;
        let next_values = v.value_batch(&Mat::from_vec(n, od, next_o_buf))?;
        let (mut adv, ret) = gae(&rewards, &values, &next_values, &ends, gamma, cfg.gae_lambda);
        normalize_advantages(&mut adv);

        let mut idx: Vec<usize> = (0..n).collect();
        let mut last_loss = 0.0;
        for _ in 0..cfg.epochs {
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(cfg.minibatch) {
                let b = chunk.len();
                let pick = |m: &Mat<f64>| {
                    let mut d = Vec::with_capacity(b * m.cols);
                    for &i in chunk {
                        d.extend_from_slice(m.row(i));
                    }
                    Mat::from_vec(b, m.cols, d)
                };
                let ob = pick(&o_mat);
                let ab = pick(&a_mat);
                let col = |xs: &[f64]| Mat::from_vec(b, 1, chunk.iter().map(|&i| xs[i]).collect());

                let mut g = Graph::new();
                let pv = bundle.policy.bind(&mut g, true);
                let ov = g.constant(ob.clone());
                let av = g.constant(ab);
                let mean = bundle.mean_action_graph(&mut g, &pv, ov);
                let lp = log_prob_graph(&mut g, av, mean, &sigma);
                let old = g.constant(col(&logp_old));
                let dlp = g.sub(lp, old);
                let ratio = g.exp(dlp);
                let advv = g.constant(col(&adv));
                let s1 = g.mul(ratio, advv);
                let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
                let s2 = g.mul(clipped, advv);
                let surr = g.min(s1, s2);
                let m = g.mean(surr);
                let loss = g.neg(m);
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence(format!("ppo policy loss {lv} in round {round}")));
                }
                let grads = g.backward(loss)?;
                let gr = collect_grads(&bundle.policy, &pv, &grads);
                pi_opt.step(&mut bundle.policy, gr)?;

                let vnet = bundle.v.as_mut().expect("ppo has V");
                let mut g = Graph::new();
                let vv = vnet.bind(&mut g, true);
                let ov = g.constant(ob);
                let pred = vnet.graph(&mut g, &vv, ov);
                let tgt = g.constant(col(&ret));
                let d = g.sub(pred, tgt);
                let sq = g.square(d);
                let vloss = g.mean(sq);
                let vl = g.value(vloss).item();
                if !vl.is_finite() {
                    return Err(Error::Divergence(format!("ppo value loss {vl} in round {round}")));
                }
                let grads = g.backward(vloss)?;
                let gr = collect_grads(&*vnet, &vv, &grads);
                v_opt.step(vnet, gr)?;
                last_loss = vl;
            }
        }
        log.losses.push(last_loss);
        debug!("ppo round {round} value loss {last_loss:.4} last return {:?}", log.episode_returns.last());
    }
    Ok((bundle, log))
}
