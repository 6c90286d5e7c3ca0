//! Twin-delayed deterministic policy gradient.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{concat_rows, layer_sizes, Algo, PolicyBundle, QHeads};
use super::TrainLog;
use crate::diff::{collect_grads, Activation, Adam, AdamConfig, Graph, Mlp, Parameterized};
use crate::env::{stream_seed, EnvSpec, EnvTask, Task};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub total_steps: usize,
    /// Uniformly random actions before learning starts.
    pub start_steps: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
    /// Polyak rate for target networks.
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Exploration noise std as a fraction of the half action range.
    pub expl_noise: f64,
    /// Target smoothing noise std, same units.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    pub hidden: Vec<usize>,
    /// Hidden activation of the critics; the actor always uses tanh.
    pub critic_activation: Activation,
    /// Evaluate the deterministic policy at the first episode boundary after
    /// every this many steps, and once at the end, returning the best
    /// snapshot. 0 keeps the final weights.
    pub eval_every: usize,
    /// Episodes per evaluation, on a fixed seed set.
    pub eval_episodes: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            total_steps: 50_000,
            start_steps: 2_000,
            buffer_size: 100_000,
            batch_size: 128,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            expl_noise: 0.1,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            hidden: vec![64, 64],
            critic_activation: Activation::Relu,
            eval_every: 0,
            eval_episodes: 5,
        }
    }
}

/// Ring buffer of `(o, a, r, o')` transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    cap: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    rew: Vec<f64>,
    next: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, cap: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            cap,
            obs: vec![0.0; cap * obs_dim],
            act: vec![0.0; cap * act_dim],
            rew: vec![0.0; cap],
            next: vec![0.0; cap * obs_dim],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, o: &[f64], a: &[f64], r: f64, o2: &[f64]) {
        let i = self.head;
        self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(o);
        self.act[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(a);
        self.rew[i] = r;
        self.next[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(o2);
        self.head = (self.head + 1) % self.cap;
        self.len = (self.len + 1).min(self.cap);
    }

    /// `(obs, act, rew, next_obs)` batch drawn with replacement.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> (Mat<f64>, Mat<f64>, Vec<f64>, Mat<f64>) {
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut o = Vec::with_capacity(n * od);
        let mut a = Vec::with_capacity(n * ad);
        let mut r = Vec::with_capacity(n);
        let mut o2 = Vec::with_capacity(n * od);
        for _ in 0..n {
            let i = rng.gen_range(0..self.len);
            o.extend_from_slice(&self.obs[i * od..(i + 1) * od]);
            a.extend_from_slice(&self.act[i * ad..(i + 1) * ad]);
            r.push(self.rew[i]);
            o2.extend_from_slice(&self.next[i * od..(i + 1) * od]);
        }
        (Mat::from_vec(n, od, o), Mat::from_vec(n, ad, a), r, Mat::from_vec(n, od, o2))
    }
}

pub fn train_td3(spec: &EnvSpec, cfg: &Td3Config, seed: u64) -> Result<(PolicyBundle, TrainLog)> {
    spec.validate()?;
    train_td3_on(&mut EnvTask::new(spec.clone()), cfg, seed)
}

/// Episodes never terminate; the horizon is a time limit, so targets always bootstrap.
pub fn train_td3_on(task: &mut dyn Task, cfg: &Td3Config, seed: u64) -> Result<(PolicyBundle, TrainLog)> {
    if cfg.batch_size == 0 || cfg.buffer_size == 0 || cfg.policy_delay == 0 {
        return Err(Error::Config("td3 batch_size, buffer_size and policy_delay must be positive".into()));
    }
    if cfg.eval_every > 0 && cfg.eval_episodes == 0 {
        return Err(Error::Config("td3 eval_episodes must be positive when eval_every is set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (od, ad) = (task.obs_dim(), task.action_dim());
    let low = task.action_low().to_vec();
    let high = task.action_high().to_vec();
    let gamma = task.gamma();
    let mut bundle = PolicyBundle {
        algo: Algo::Td3,
        obs_dim: od,
        action_dim: ad,
        action_low: low.clone(),
        action_high: high.clone(),
        policy: Mlp::new(&mut rng, "pi", &layer_sizes(od, &cfg.hidden, ad), 0.1),
        q: Some(QHeads::new(&mut rng, "q", od, ad, &cfg.hidden, cfg.critic_activation, 2, 1.0 / (1.0 - gamma))),
        v: None,
        sigma: None,
    };
    let half = bundle.half_range();
    let mut target = bundle.clone();
    let mut actor_opt = Adam::new(AdamConfig::with_lr(cfg.actor_lr));
    let mut critic_opt = Adam::new(AdamConfig::with_lr(cfg.critic_lr));
    let mut buf = ReplayBuffer::new(od, ad, cfg.buffer_size);
    let mut log = TrainLog::default();

    let eval_base = stream_seed(seed, TD3_EVAL_STREAM);
    let mut best: Option<(f64, PolicyBundle)> = None;
    let mut next_eval = cfg.eval_every;

    let mut episode = 0u64;
    let mut obs = task.reset(seed.wrapping_add(episode))?;
    let mut ep_ret = 0.0;
    for step in 0..cfg.total_steps {
        let action: Vec<f64> = if step < cfg.start_steps {
            low.iter().zip(&high).map(|(&l, &h)| rng.gen_range(l..h)).collect()
        } else {
            let m = bundle.mean_action(&obs)?;
            m.iter()
                .zip(&half)
                .zip(low.iter().zip(&high))
                .map(|((&a, &hr), (&l, &h))| (a + cfg.expl_noise * hr * rng.sample::<f64, _>(StandardNormal)).clamp(l, h))
                .collect()
        };
        let (next, r, done) = task.step(&action)?;
        buf.push(&obs, &action, r, &next);
        ep_ret += r;
        obs = next;
        if done {
            log.episode_returns.push(ep_ret);
            debug!("td3 step {step} episode return {ep_ret:.3}");
            ep_ret = 0.0;
            episode += 1;
            if cfg.eval_every > 0 && step + 1 >= next_eval {
                next_eval = step + 1 + cfg.eval_every;
                consider(&mut best, task, &bundle, eval_base, cfg.eval_episodes)?;
            }
            obs = task.reset(seed.wrapping_add(episode))?;
        }
        if step + 1 < cfg.start_steps || buf.len() < cfg.batch_size {
            continue;
        }
        let (o, a, rw, o2) = buf.sample(&mut rng, cfg.batch_size);

        let mut a2 = target.mean_action_batch(&o2)?;
        for r_ in 0..a2.rows {
            for (j, v) in a2.row_mut(r_).iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                let n = (cfg.policy_noise * eps).clamp(-cfg.noise_clip, cfg.noise_clip) * half[j];
                *v = (*v + n).clamp(low[j], high[j]);
            }
        }
        let tq = target.q.as_ref().expect("td3 target has Q").value_batch(&o2, &a2)?;
        let y: Vec<f64> = rw.iter().zip(&tq).map(|(r, q)| r + gamma * q).collect();
        let y = Mat::from_vec(cfg.batch_size, 1, y);

        let q = bundle.q.as_mut().expect("td3 bundle has Q");
        let mut g = Graph::new();
        let qv = q.bind(&mut g, true);
        let x = g.constant(concat_rows(&o, &a));
        let yv = g.constant(y);
        let mut loss = None;
        for h in 0..q.heads.len() {
            let pred = q.head_graph(&mut g, &qv, h, x);
            let d = g.sub(pred, yv);
            let sq = g.square(d);
            let l = g.mean(sq);
            loss = Some(match loss {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let loss = loss.expect("Q heads");
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("td3 critic loss {lv} at step {step}")));
        }
        let grads = g.backward(loss)?;
        let gr = collect_grads(&*q, &qv, &grads);
        critic_opt.step(q, gr)?;
        log.losses.push(lv);

        if step % cfg.policy_delay == 0 {
            let mut g = Graph::new();
            let pv = bundle.policy.bind(&mut g, true);
            let q = bundle.q.as_ref().expect("td3 bundle has Q");
            let qv = q.bind(&mut g, false);
            let ov = g.constant(o.clone());
            let act = bundle.mean_action_graph(&mut g, &pv, ov);
            let x = g.concat_cols(ov, act);
            let q1 = q.head_graph(&mut g, &qv, 0, x);
            let m = g.mean(q1);
            let loss = g.neg(m);
            let grads = g.backward(loss)?;
            let gr = collect_grads(&bundle.policy, &pv, &grads);
            actor_opt.step(&mut bundle.policy, gr)?;
            target.policy.soft_update_from(&bundle.policy, cfg.tau);
            target.q.as_mut().expect("Q").soft_update_from(bundle.q.as_ref().expect("Q"), cfg.tau);
        }
    }
    if cfg.eval_every == 0 {
        return Ok((bundle, log));
    }
    consider(&mut best, task, &bundle, eval_base, cfg.eval_episodes)?;
    let (ret, chosen) = best.expect("evaluated at least once");
    debug!("td3 keeps the snapshot with evaluation return {ret:.3}");
    Ok((chosen, log))
}

/// Seed stream of the snapshot-selection episodes.
pub const TD3_EVAL_STREAM: u64 = 0x7e57;

/// Mean undiscounted return of the deterministic policy on `n` fixed seeds.
fn evaluate(task: &mut dyn Task, bundle: &PolicyBundle, base: u64, n: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n as u64 {
        let mut obs = task.reset(base.wrapping_add(i))?;
        loop {
            let (next, r, done) = task.step(&bundle.mean_action(&obs)?)?;
            total += r;
            obs = next;
            if done {
                break;
            }
        }
    }
    Ok(total / n as f64)
}

/// Keeps `bundle` if it beats the best evaluated snapshot; ties keep the earlier one.
fn consider(best: &mut Option<(f64, PolicyBundle)>, task: &mut dyn Task, bundle: &PolicyBundle, base: u64, n: usize) -> Result<()> {
    let ret = evaluate(task, bundle, base, n)?;
    debug!("td3 evaluation return {ret:.3}");
    if best.as_ref().is_none_or(|(b, _)| ret > *b) {
        *best = Some((ret, bundle.clone()));
    }
    Ok(())
}
