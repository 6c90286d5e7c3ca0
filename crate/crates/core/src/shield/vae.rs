//! Recurrent variational autoencoder over observation streams.
//!
//! Per step, with observations in normalised units:
//!
//! ```text
//! h_enc' = GRU_enc(x_t, h_enc)
//! mu, log_sigma = heads(h_enc')
//! mu_prior = prior_head(h_dec)            previous decoder state
//! z = mu + exp(log_sigma) * noise         or z = mu in mean mode
//! h_dec' = GRU_dec(z, h_dec)
//! x_out = out_head(h_dec')
//! ```
//!
//! The prior covariance is the identity and is never parameterised.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::ObsNormalizer;
use crate::diff::dist::{kl_graph, reparam_graph};
use crate::diff::{kl_diag_gaussian, Activation, Dense, Graph, GruCellParams, ParamTensor, Parameterized, Var};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;

/// Bounds applied to the log standard deviation head.
const LOG_SIGMA_RANGE: (f64, f64) = (-8.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Reparameterised draw.
    Sample,
    /// Use the posterior mean.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruVae {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub norm: ObsNormalizer,
    pub encoder: GruCellParams<f64>,
    pub mu_head: Dense<f64>,
    pub log_sigma_head: Dense<f64>,
    pub decoder: GruCellParams<f64>,
    pub out_head: Dense<f64>,
    pub prior_head: Dense<f64>,
}

/// Recurrent state carried across one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeState {
    pub h_enc: Vec<f64>,
    pub h_dec: Vec<f64>,
}

/// Everything one step produces. `out` is in raw units, the rest in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeStep {
    pub out: Vec<f64>,
    pub out_norm: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub mu_prior: Vec<f64>,
}

/// Graph handles for one batched step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub out: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub mu_prior: Var,
    pub h_enc: Var,
    pub h_dec: Var,
}

impl GruVae {
    pub fn new<R: Rng>(rng: &mut R, norm: ObsNormalizer, hidden_dim: usize, latent_dim: usize) -> Self {
        let d = norm.dim();
        let lin = Activation::Identity;
        Self {
            obs_dim: d,
            hidden_dim,
            latent_dim,
            encoder: GruCellParams::new(rng, "enc", d, hidden_dim),
            mu_head: Dense::new(rng, "mu", hidden_dim, latent_dim, lin, 1.0),
            log_sigma_head: Dense::new(rng, "log_sigma", hidden_dim, latent_dim, lin, 0.1),
            decoder: GruCellParams::new(rng, "dec", latent_dim, hidden_dim),
            out_head: Dense::new(rng, "out", hidden_dim, d, lin, 1.0),
            prior_head: Dense::new(rng, "prior", hidden_dim, latent_dim, lin, 1.0),
            norm,
        }
    }

    /// Every parameter zero; outputs the normaliser mean.
    pub fn zeros(norm: ObsNormalizer, hidden_dim: usize, latent_dim: usize) -> Self {
        let d = norm.dim();
        let lin = Activation::Identity;
        Self {
            obs_dim: d,
            hidden_dim,
            latent_dim,
            encoder: GruCellParams::zeros("enc", d, hidden_dim),
            mu_head: Dense::zeros("mu", hidden_dim, latent_dim, lin),
            log_sigma_head: Dense::zeros("log_sigma", hidden_dim, latent_dim, lin),
            decoder: GruCellParams::zeros("dec", latent_dim, hidden_dim),
            out_head: Dense::zeros("out", hidden_dim, d, lin),
            prior_head: Dense::zeros("prior", hidden_dim, latent_dim, lin),
            norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        check_dim("vae normalizer", self.obs_dim, self.norm.dim())?;
        check_dim("vae encoder input", self.obs_dim, self.encoder.input_dim())?;
        check_dim("vae decoder input", self.latent_dim, self.decoder.input_dim())?;
        check_dim("vae out head", self.obs_dim, self.out_head.output_dim())?;
        check_dim("vae mu head", self.latent_dim, self.mu_head.output_dim())?;
        check_dim("vae log_sigma head", self.latent_dim, self.log_sigma_head.output_dim())?;
        check_dim("vae prior head", self.latent_dim, self.prior_head.output_dim())?;
        if self.tensors().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("vae parameters".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> VaeState {
        VaeState { h_enc: vec![0.0; self.hidden_dim], h_dec: vec![0.0; self.hidden_dim] }
    }

    /// One step on a raw observation. `noise` is only read in sample mode.
    pub fn step(&self, obs: &[f64], state: &mut VaeState, noise: Option<&[f64]>) -> Result<VaeStep> {
        check_dim("vae obs", self.obs_dim, obs.len())?;
        if let Some(n) = noise {
            check_dim("vae noise", self.latent_dim, n.len())?;
        }
        let x = Mat::row_vec(&self.norm.normalize(obs));
        let h_enc = self.encoder.step(&x, &Mat::row_vec(&state.h_enc));
        let mu = self.mu_head.forward(&h_enc);
        let log_sigma = self.log_sigma_head.forward(&h_enc).map(|v| v.clamp(LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1));
        let h_dec_prev = Mat::row_vec(&state.h_dec);
        let mu_prior = self.prior_head.forward(&h_dec_prev);
        let z = match noise {
            Some(n) => Mat::row_vec(&mu.data.iter().zip(&log_sigma.data).zip(n).map(|((m, s), e)| m + s.exp() * e).collect::<Vec<_>>()),
            None => mu.clone(),
        };
        let h_dec = self.decoder.step(&z, &h_dec_prev);
        let out_norm = self.out_head.forward(&h_dec).data;
        state.h_enc = h_enc.data;
        state.h_dec = h_dec.data;
        Ok(VaeStep { out: self.norm.denormalize(&out_norm), out_norm, mu: mu.data, log_sigma: log_sigma.data, mu_prior: mu_prior.data })
    }

    /// Draw standard normal noise when `mode` samples.
    pub fn draw_noise(&self, mode: LatentMode, rng: &mut impl Rng) -> Option<Vec<f64>> {
        match mode {
            LatentMode::Sample => Some((0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect()),
            LatentMode::Mean => None,
        }
    }

    /// Run a whole raw sequence from the zero state.
    pub fn run(&self, seq: &[Vec<f64>], mode: LatentMode, rng: &mut impl Rng) -> Result<Vec<VaeStep>> {
        let mut state = self.initial_state();
        seq.iter()
            .map(|o| {
                let noise = self.draw_noise(mode, rng);
                self.step(o, &mut state, noise.as_deref())
            })
            .collect()
    }

    /// Batched graph step on normalised inputs. `vars` come from `bind`.
    pub fn step_graph(&self, g: &mut Graph<f64>, vars: &[Var], x: Var, h_enc: Var, h_dec: Var, noise: Option<Var>) -> StepVars {
        let (enc, rest) = vars.split_at(9);
        let (mu_v, rest) = rest.split_at(2);
        let (ls_v, rest) = rest.split_at(2);
        let (dec, rest) = rest.split_at(9);
        let (out_v, prior_v) = rest.split_at(2);
        let h_enc2 = self.encoder.step_graph(g, enc, x, h_enc);
        let mu = self.mu_head.forward_graph(g, mu_v, h_enc2);
        let ls_raw = self.log_sigma_head.forward_graph(g, ls_v, h_enc2);
        let log_sigma = g.clamp(ls_raw, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1);
        let mu_prior = self.prior_head.forward_graph(g, prior_v, h_dec);
        let z = match noise {
            Some(n) => reparam_graph(g, mu, log_sigma, n),
            None => mu,
        };
        let h_dec2 = self.decoder.step_graph(g, dec, z, h_dec);
        let out = self.out_head.forward_graph(g, out_v, h_dec2);
        StepVars { out, mu, log_sigma, mu_prior, h_enc: h_enc2, h_dec: h_dec2 }
    }

    /// Mean over the batch of `sum_t [0.5 |x_out - target|^2 + KL] / T` on
    /// normalised `(B x d)` inputs and targets. Returns the loss and the
    /// step handles.
    pub fn sequence_loss_graph(
        &self,
        g: &mut Graph<f64>,
        vars: &[Var],
        inputs: &[Mat<f64>],
        targets: &[Mat<f64>],
        noise: Option<&[Mat<f64>]>,
    ) -> Result<(Var, Vec<StepVars>)> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        check_dim("elbo targets", inputs.len(), targets.len())?;
        let b = inputs[0].rows;
        let mut h_enc = g.constant(Mat::zeros(b, self.hidden_dim));
        let mut h_dec = g.constant(Mat::zeros(b, self.hidden_dim));
        let mut total: Option<Var> = None;
        let mut steps = Vec::with_capacity(inputs.len());
        for (t, (x, y)) in inputs.iter().zip(targets).enumerate() {
            check_dim("elbo input width", self.obs_dim, x.cols)?;
            check_dim("elbo batch", b, x.rows)?;
            check_dim("elbo target batch", b, y.rows)?;
            let xv = g.constant(x.clone());
            let nv = noise.map(|n| g.constant(n[t].clone()));
            let s = self.step_graph(g, vars, xv, h_enc, h_dec, nv);
            let yv = g.constant(y.clone());
            let d = g.sub(s.out, yv);
            let d2 = g.square(d);
            let rec = g.row_sum(d2);
            let rec = g.scale(rec, 0.5);
            let kl = kl_graph(g, s.mu, s.log_sigma, s.mu_prior);
            let term = g.add(rec, kl);
            let term = g.sum(term);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
            h_enc = s.h_enc;
            h_dec = s.h_dec;
            steps.push(s);
        }
        let loss = g.scale(total.expect("non-empty"), 1.0 / (inputs.len() * b) as f64);
        Ok((loss, steps))
    }
}

/// `sum_t [0.5 |x_out,t - target_t|^2 + KL_t] / T` for one raw sequence pair,
/// in normalised units. `noise[t]` drives sampling; `None` uses the mean.
pub fn elbo_loss(model: &GruVae, inputs: &[Vec<f64>], targets: &[Vec<f64>], noise: Option<&[Vec<f64>]>) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptySequence);
    }
    check_dim("elbo targets", inputs.len(), targets.len())?;
    let mut state = model.initial_state();
    let mut total = 0.0;
    for (t, (o, y)) in inputs.iter().zip(targets).enumerate() {
        let s = model.step(o, &mut state, noise.map(|n| n[t].as_slice()))?;
        let yn = model.norm.normalize(y);
        let rec: f64 = s.out_norm.iter().zip(&yn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
        total += rec + kl_diag_gaussian(&s.mu, &s.log_sigma, &s.mu_prior)?;
    }
    Ok(total / inputs.len() as f64)
}

impl Parameterized<f64> for GruVae {
    fn tensors(&self) -> Vec<&ParamTensor<f64>> {
        let mut v = self.encoder.tensors();
        v.extend([&self.mu_head.w, &self.mu_head.b, &self.log_sigma_head.w, &self.log_sigma_head.b]);
        v.extend(self.decoder.tensors());
        v.extend([&self.out_head.w, &self.out_head.b, &self.prior_head.w, &self.prior_head.b]);
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut v = self.encoder.tensors_mut();
        v.extend([&mut self.mu_head.w, &mut self.mu_head.b, &mut self.log_sigma_head.w, &mut self.log_sigma_head.b]);
        v.extend(self.decoder.tensors_mut());
        v.extend([&mut self.out_head.w, &mut self.out_head.b, &mut self.prior_head.w, &mut self.prior_head.b]);
        v
    }
}
