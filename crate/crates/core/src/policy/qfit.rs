//! Fitted Q evaluation of a stochastic policy from logged transitions.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{concat_rows, PolicyBundle, QHeads};
use crate::diff::{collect_grads, Activation, Adam, AdamConfig, Graph, Parameterized};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFitConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Polyak rate for the target network.
    pub tau: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    /// Fraction of tuples withheld for the TD-error check.
    pub holdout_frac: f64,
    pub activation: Activation,
}

impl Default for QFitConfig {
    fn default() -> Self {
        Self { updates: 20_000, batch_size: 128, lr: 1e-3, tau: 0.02, gamma: 0.99, hidden: vec![64, 64], holdout_frac: 0.1, activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QFitReport {
    /// Mean squared TD error per block of updates.
    pub loss_curve: Vec<f64>,
    /// Root-mean-square TD error on held-out tuples.
    pub heldout_td_rmse: f64,
}

struct Tuples {
    o: Mat<f64>,
    a: Mat<f64>,
    r: Vec<f64>,
    o2: Mat<f64>,
}

fn gather(data: &[&Transition], od: usize, ad: usize) -> Tuples {
    let n = data.len();
    let mut o = Vec::with_capacity(n * od);
    let mut a = Vec::with_capacity(n * ad);
    let mut o2 = Vec::with_capacity(n * od);
    for t in data {
        o.extend_from_slice(&t.obs);
        a.extend_from_slice(&t.action);
        o2.extend_from_slice(&t.next_obs);
    }
    Tuples {
        o: Mat::from_vec(n, od, o),
        a: Mat::from_vec(n, ad, a),
        r: data.iter().map(|t| t.reward).collect(),
        o2: Mat::from_vec(n, od, o2),
    }
}

/// Next actions drawn from the policy (mean plus constant-covariance noise).
fn policy_actions(bundle: &PolicyBundle, o2: &Mat<f64>, rng: &mut impl Rng) -> Result<Mat<f64>> {
    let mut a2 = bundle.mean_action_batch(o2)?;
    if let Some(sigma) = &bundle.sigma {
        for r in 0..a2.rows {
            for (v, s) in a2.row_mut(r).iter_mut().zip(sigma) {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(a2)
}

/// Fit `Q^pi` by temporal-difference regression: `Q(o, a) <- r + gamma Q'(o', a')`
/// with `a' ~ pi(o')`. Returns a copy of `bundle` carrying the fitted Q.
pub fn train_q_for_ppo(bundle: &PolicyBundle, data: &[Transition], cfg: &QFitConfig, seed: u64) -> Result<(PolicyBundle, QFitReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("q fitting"));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::Config("q fitting batch_size must be positive and holdout_frac in [0, 1)".into()));
    }
    let (od, ad) = (bundle.obs_dim, bundle.action_dim);
    for t in data {
        check_dim("transition obs", od, t.obs.len())?;
        check_dim("transition action", ad, t.action.len())?;
        check_dim("transition next_obs", od, t.next_obs.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&Transition> = data.iter().collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_hold = ((data.len() as f64) * cfg.holdout_frac).floor() as usize;
    let n_hold = if data.len() - n_hold == 0 { 0 } else { n_hold };
    let (hold, train) = order.split_at(n_hold);
    let train = gather(train, od, ad);
    let n = train.r.len();

    let mut q = QHeads::new(&mut rng, "q", od, ad, &cfg.hidden, cfg.activation, 1, 1.0 / (1.0 - cfg.gamma));
    q.zero_output_layers();
    let mut target = q.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = QFitReport::default();
    let block = (cfg.updates / 50).max(1);
    let mut acc = 0.0;
    for step in 0..cfg.updates {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let pick = |m: &Mat<f64>| {
            let mut d = Vec::with_capacity(idx.len() * m.cols);
            for &i in &idx {
                d.extend_from_slice(m.row(i));
            }
            Mat::from_vec(idx.len(), m.cols, d)
        };
        let (o, a, o2) = (pick(&train.o), pick(&train.a), pick(&train.o2));
        let a2 = policy_actions(bundle, &o2, &mut rng)?;
        let tq = target.value_batch(&o2, &a2)?;
        let y: Vec<f64> = idx.iter().zip(&tq).map(|(&i, q)| train.r[i] + cfg.gamma * q).collect();

        let mut g = Graph::new();
        let qv = q.bind(&mut g, true);
        let x = g.constant(concat_rows(&o, &a));
        let pred = q.graph_on_input(&mut g, &qv, x);
        let yv = g.constant(Mat::from_vec(idx.len(), 1, y));
        let d = g.sub(pred, yv);
        let sq = g.square(d);
        let loss = g.mean(sq);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("q fitting loss {lv} at update {step}")));
        }
        let grads = g.backward(loss)?;
        let gr = collect_grads(&q, &qv, &grads);
        opt.step(&mut q, gr)?;
        target.soft_update_from(&q, cfg.tau);
        acc += lv;
        if (step + 1) % block == 0 {
            report.loss_curve.push(acc / block as f64);
            acc = 0.0;
        }
    }
    if !hold.is_empty() {
        let h = gather(hold, od, ad);
        let a2 = policy_actions(bundle, &h.o2, &mut rng)?;
        let next = q.value_batch(&h.o2, &a2)?;
        let cur = q.value_batch(&h.o, &h.a)?;
        let mse = cur.iter().zip(&next).zip(&h.r).map(|((c, nx), r)| (r + cfg.gamma * nx - c).powi(2)).sum::<f64>() / h.r.len() as f64;
        report.heldout_td_rmse = mse.sqrt();
    }
    debug!("q fit: final loss {:?}, held-out TD rmse {:.4}", report.loss_curve.last(), report.heldout_td_rmse);
    let mut out = bundle.clone();
    out.q = Some(q);
    Ok((out, report))
}
