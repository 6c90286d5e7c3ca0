//! Trained victim policies and their critics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::dist::diag_gaussian_log_prob;
use crate::diff::{Activation, Graph, Mlp, ParamTensor, Parameterized, Var};
use crate::env::{EnvSpec, PolicyAdapter};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Td3,
    Ppo,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Td3 => "td3",
            Algo::Ppo => "ppo",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "td3" => Ok(Algo::Td3),
            "ppo" => Ok(Algo::Ppo),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDecision {
    pub mean_action: Vec<f64>,
    /// Unclipped draw; the environment clips it.
    pub sampled_action: Vec<f64>,
    /// Density of `sampled_action` under `N(mean_action, diag(sigma^2))`.
    pub log_prob: Option<f64>,
}

fn unit_scale() -> f64 {
    1.0
}

/// One or more `Q(o, a)` heads; the value is the minimum over heads.
/// Each head's raw output is multiplied by `scale`, so the networks work
/// with values of order one while returns are in environment units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QHeads {
    pub heads: Vec<Mlp<f64>>,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

impl QHeads {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        act: Activation,
        n: usize,
        scale: f64,
    ) -> Self {
        let sizes = layer_sizes(obs_dim + action_dim, hidden, 1);
        let heads = (0..n).map(|i| Mlp::with_activation(rng, &format!("{name}{}", i + 1), &sizes, act, 1.0)).collect();
        Self { heads, scale }
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    /// Zero every head's output layer, so all heads start at exactly zero.
    pub fn zero_output_layers(&mut self) {
        for h in &mut self.heads {
            if let Some(l) = h.layers.last_mut() {
                l.zero_all();
            }
        }
    }

    pub fn head_values(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = obs.iter().chain(action).copied().collect();
        self.heads.iter().map(|h| Ok(self.scale * h.forward_vec(&x)?[0])).collect()
    }

    pub fn value(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.head_values(obs, action)?.into_iter().fold(f64::INFINITY, f64::min))
    }

    /// Batched min over heads for `(B x obs)` and `(B x act)` matrices.
    pub fn value_batch(&self, obs: &Mat<f64>, actions: &Mat<f64>) -> Result<Vec<f64>> {
        let x = concat_rows(obs, actions);
        let mut out = vec![f64::INFINITY; obs.rows];
        for h in &self.heads {
            for (o, v) in out.iter_mut().zip(h.forward(&x)?.data) {
                *o = o.min(self.scale * v);
            }
        }
        Ok(out)
    }

    /// `(B x 1)` minimum over heads. `vars` as produced by [`Parameterized::bind`].
    pub fn graph(&self, g: &mut Graph<f64>, vars: &[Var], obs: Var, action: Var) -> Var {
        let x = g.concat_cols(obs, action);
        self.graph_on_input(g, vars, x)
    }

    pub fn graph_on_input(&self, g: &mut Graph<f64>, vars: &[Var], x: Var) -> Var {
        let mut best: Option<Var> = None;
        for h in 0..self.heads.len() {
            let q = self.head_graph(g, vars, h, x);
            best = Some(match best {
                None => q,
                Some(b) => g.min(b, q),
            });
        }
        best.expect("at least one Q head")
    }

    /// One head's scaled `(B x 1)` output.
    pub fn head_graph(&self, g: &mut Graph<f64>, vars: &[Var], head: usize, x: Var) -> Var {
        let off: usize = self.heads[..head].iter().map(|h| 2 * h.layers.len()).sum();
        let n = 2 * self.heads[head].layers.len();
        let raw = self.heads[head].forward_graph(g, &vars[off..off + n], x);
        g.scale(raw, self.scale)
    }
}

/// State-value network with the same output scaling as [`QHeads`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp<f64>,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

impl ValueNet {
    pub fn new<R: Rng>(rng: &mut R, name: &str, obs_dim: usize, hidden: &[usize], scale: f64) -> Self {
        Self { net: Mlp::new(rng, name, &layer_sizes(obs_dim, hidden, 1), 1.0), scale }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.scale * self.net.forward_vec(obs)?[0])
    }

    pub fn value_batch(&self, obs: &Mat<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(obs)?.data.into_iter().map(|v| self.scale * v).collect())
    }

    pub fn graph(&self, g: &mut Graph<f64>, vars: &[Var], obs: Var) -> Var {
        let raw = self.net.forward_graph(g, vars, obs);
        g.scale(raw, self.scale)
    }
}

impl Parameterized<f64> for ValueNet {
    fn tensors(&self) -> Vec<&ParamTensor<f64>> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        self.net.tensors_mut()
    }
}

impl Parameterized<f64> for QHeads {
    fn tensors(&self) -> Vec<&ParamTensor<f64>> {
        self.heads.iter().flat_map(|h| h.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        self.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect()
    }
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

pub(crate) fn concat_rows(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Mat::from_vec(a.rows, cols, data)
}

/// Policy network plus critics.
///
/// The policy network emits an unbounded vector `y`; the action mean is
/// `center + half_range * tanh(y)`, so it always lies inside the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub algo: Algo,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub policy: Mlp<f64>,
    /// TD3: twin critics. PPO: fitted after training, see `train_q_for_ppo`.
    pub q: Option<QHeads>,
    /// PPO only.
    pub v: Option<ValueNet>,
    /// PPO only: per-dimension standard deviation in action units.
    pub sigma: Option<Vec<f64>>,
}

impl PolicyBundle {
    pub fn validate(&self) -> Result<()> {
        check_dim("policy input", self.obs_dim, self.policy.input_dim())?;
        check_dim("policy output", self.action_dim, self.policy.output_dim())?;
        check_dim("action_low", self.action_dim, self.action_low.len())?;
        check_dim("action_high", self.action_dim, self.action_high.len())?;
        if let Some(q) = &self.q {
            if q.heads.is_empty() {
                return Err(Error::Invalid("Q without heads".into()));
            }
            check_dim("q input", self.obs_dim + self.action_dim, q.input_dim())?;
        }
        match self.algo {
            Algo::Td3 => {
                if self.q.is_none() {
                    return Err(Error::Invalid("TD3 bundle without Q".into()));
                }
            }
            Algo::Ppo => {
                let v = self.v.as_ref().ok_or_else(|| Error::Invalid("PPO bundle without V".into()))?;
                check_dim("v input", self.obs_dim, v.input_dim())?;
                let s = self.sigma.as_ref().ok_or_else(|| Error::Invalid("PPO bundle without sigma".into()))?;
                check_dim("sigma", self.action_dim, s.len())?;
                if s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(Error::Invalid("sigma must be strictly positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_range(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn matches_env(&self, spec: &EnvSpec) -> Result<()> {
        check_dim("bundle obs_dim", spec.obs_dim, self.obs_dim)?;
        check_dim("bundle action_dim", spec.action_dim, self.action_dim)
    }

    /// Deterministic action `pi(o)` (the Gaussian mean for PPO).
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        check_dim("obs", self.obs_dim, obs.len())?;
        check_finite("obs", obs)?;
        let y = self.policy.forward_vec(obs)?;
        Ok(self.squash(&y))
    }

    pub fn mean_action_batch(&self, obs: &Mat<f64>) -> Result<Mat<f64>> {
        let y = self.policy.forward(obs)?;
        let (c, h) = (self.center(), self.half_range());
        let mut out = y;
        for r in 0..out.rows {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = c[j] + h[j] * v.fast_tanh();
            }
        }
        Ok(out)
    }

    fn squash(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&v, (&l, &h))| 0.5 * (l + h) + 0.5 * (h - l) * v.fast_tanh())
            .collect()
    }

    /// `(B x action)` mean actions; `vars` from `self.policy.bind`.
    pub fn mean_action_graph(&self, g: &mut Graph<f64>, vars: &[Var], obs: Var) -> Var {
        let y = self.policy.forward_graph(g, vars, obs);
        let t = g.tanh(y);
        g.affine_cols(t, &self.half_range(), &self.center())
    }

    pub fn act(&self, obs: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<ActionDecision> {
        let mean = self.mean_action(obs)?;
        match (self.algo, &self.sigma) {
            (Algo::Ppo, Some(sigma)) => {
                let sampled = match mode {
                    ActMode::Mean => mean.clone(),
                    ActMode::Sample => mean
                        .iter()
                        .zip(sigma)
                        .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                let lp = diag_gaussian_log_prob(&sampled, &mean, sigma);
                Ok(ActionDecision { mean_action: mean, sampled_action: sampled, log_prob: Some(lp) })
            }
            _ => Ok(ActionDecision { sampled_action: mean.clone(), mean_action: mean, log_prob: None }),
        }
    }

    pub fn act_seeded(&self, obs: &[f64], mode: ActMode, seed: u64) -> Result<ActionDecision> {
        self.act(obs, mode, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn q_value(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        check_dim("obs", self.obs_dim, obs.len())?;
        check_dim("action", self.action_dim, action.len())?;
        check_finite("obs", obs)?;
        self.q.as_ref().ok_or(Error::MissingQ)?.value(obs, action)
    }

    /// TD3: `Q(o, pi(o))`. PPO: the V network.
    pub fn state_value(&self, obs: &[f64]) -> Result<f64> {
        match self.algo {
            Algo::Td3 => {
                let a = self.mean_action(obs)?;
                self.q_value(obs, &a)
            }
            Algo::Ppo => {
                check_dim("obs", self.obs_dim, obs.len())?;
                check_finite("obs", obs)?;
                let v = self.v.as_ref().ok_or_else(|| Error::Invalid("PPO bundle without V".into()))?;
                v.value(obs)
            }
        }
    }

    /// Default rollout mode: deterministic for TD3, stochastic for PPO.
    pub fn deploy_mode(&self) -> ActMode {
        match self.algo {
            Algo::Td3 => ActMode::Mean,
            Algo::Ppo => ActMode::Sample,
        }
    }

    pub fn actor(&self, mode: ActMode) -> BundleActor<'_> {
        BundleActor { bundle: self, mode }
    }
}

/// [`PolicyAdapter`] over a bundle.
#[derive(Debug, Clone, Copy)]
pub struct BundleActor<'a> {
    pub bundle: &'a PolicyBundle,
    pub mode: ActMode,
}

impl PolicyAdapter for BundleActor<'_> {
    fn obs_dim(&self) -> usize {
        self.bundle.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.bundle.action_dim
    }
    fn act(&mut self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.bundle.act(obs, self.mode, rng)?.sampled_action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Dense;

    pub(crate) fn toy_bundle(algo: Algo) -> PolicyBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QHeads::new(&mut rng, "q", 4, 2, &[8], Activation::Tanh, 2, 1.0);
        PolicyBundle {
            algo,
            obs_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            policy: Mlp::new(&mut rng, "pi", &[4, 8, 2], 1.0),
            q: Some(q),
            v: (algo == Algo::Ppo).then(|| ValueNet::new(&mut rng, "v", 4, &[8], 1.0)),
            sigma: (algo == Algo::Ppo).then(|| vec![0.3, 0.7]),
        }
    }

    fn constant_head(c: f64, input: usize) -> Mlp<f64> {
        let mut l = Dense::zeros("c", input, 1, crate::diff::Activation::Identity);
        l.b.value.data[0] = c;
        Mlp::from_layers(vec![l]).unwrap()
    }

    #[test]
    fn td3_ignores_mode() {
        let b = toy_bundle(Algo::Td3);
        let o = [0.1, -0.2, 0.3, 0.0];
        for mode in [ActMode::Mean, ActMode::Sample] {
            let d = b.act_seeded(&o, mode, 9).unwrap();
            assert_eq!(d.mean_action, d.sampled_action);
            assert!(d.log_prob.is_none());
        }
    }

    #[test]
    fn ppo_mean_mode_returns_mean() {
        let b = toy_bundle(Algo::Ppo);
        let d = b.act_seeded(&[0.1, -0.2, 0.3, 0.0], ActMode::Mean, 5).unwrap();
        assert_eq!(d.mean_action, d.sampled_action);
    }

    #[test]
    fn mean_mode_is_seed_invariant() {
        let b = toy_bundle(Algo::Ppo);
        let o = [0.4, 0.0, -0.3, 0.2];
        let a = b.act_seeded(&o, ActMode::Mean, 1).unwrap();
        let c = b.act_seeded(&o, ActMode::Mean, 2).unwrap();
        assert_eq!(a, c);
        let s1 = b.act_seeded(&o, ActMode::Sample, 1).unwrap();
        let s2 = b.act_seeded(&o, ActMode::Sample, 2).unwrap();
        assert_eq!(s1.mean_action, s2.mean_action);
        assert_ne!(s1.sampled_action, s2.sampled_action);
    }

    #[test]
    fn mean_action_within_bounds() {
        let b = toy_bundle(Algo::Td3);
        let a = b.mean_action(&[100.0, -50.0, 30.0, 7.0]).unwrap();
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn non_finite_obs_is_rejected() {
        let b = toy_bundle(Algo::Ppo);
        assert!(matches!(b.act_seeded(&[f64::NAN, 0.0, 0.0, 0.0], ActMode::Mean, 0), Err(Error::NonFinite(_))));
        assert!(b.act_seeded(&[0.0; 3], ActMode::Mean, 0).is_err());
    }

    #[test]
    fn zero_q_is_zero() {
        let mut b = toy_bundle(Algo::Td3);
        b.q.as_mut().unwrap().zero_all();
        assert_eq!(b.q_value(&[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5]).unwrap(), 0.0);
    }

    #[test]
    fn twin_q_takes_minimum() {
        let mut b = toy_bundle(Algo::Td3);
        b.q = Some(QHeads { heads: vec![constant_head(1.0, 6), constant_head(2.0, 6)], scale: 1.0 });
        assert_eq!(b.q_value(&[0.0; 4], &[0.0; 2]).unwrap(), 1.0);
    }

    #[test]
    fn zero_v_is_zero() {
        let mut b = toy_bundle(Algo::Ppo);
        b.v.as_mut().unwrap().zero_all();
        assert_eq!(b.state_value(&[0.3, 0.1, -0.2, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn td3_state_value_is_q_at_policy_action() {
        let b = toy_bundle(Algo::Td3);
        let o = [0.2, 0.5, -0.1, 0.3];
        let a = b.act_seeded(&o, ActMode::Mean, 0).unwrap().mean_action;
        assert_eq!(b.state_value(&o).unwrap(), b.q_value(&o, &a).unwrap());
    }

    #[test]
    fn ppo_without_q_errors() {
        let mut b = toy_bundle(Algo::Ppo);
        b.q = None;
        assert!(matches!(b.q_value(&[0.0; 4], &[0.0; 2]), Err(Error::MissingQ)));
    }

    #[test]
    fn validate_rejects_bad_sigma() {
        let mut b = toy_bundle(Algo::Ppo);
        b.sigma = Some(vec![0.3, 0.0]);
        assert!(b.validate().is_err());
        assert!(toy_bundle(Algo::Ppo).validate().is_ok());
    }

    #[test]
    fn graph_mean_matches_plain() {
        let b = toy_bundle(Algo::Ppo);
        let obs = Mat::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.0, 0.9, -0.1]);
        let mut g = Graph::new();
        let vars = b.policy.bind(&mut g, false);
        let o = g.constant(obs.clone());
        let a = b.mean_action_graph(&mut g, &vars, o);
        let plain = b.mean_action_batch(&obs).unwrap();
        assert_eq!(g.value(a).data.len(), plain.data.len());
        for (x, y) in g.value(a).data.iter().zip(&plain.data) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
