//! Diagonal Gaussian helpers: reparameterised sampling, KL divergence to a
//! unit-covariance prior, and log-densities.

use super::graph::{Graph, Var};
use crate::error::{check_dim, Result};
use crate::scalar::{sum_acc, Scalar};

/// `z = mu + exp(log_sigma) * noise`.
pub fn gaussian_reparam_sample<T: Scalar>(mu: &[T], log_sigma: &[T], noise: &[T]) -> Result<Vec<T>> {
    check_dim("reparam log_sigma", mu.len(), log_sigma.len())?;
    check_dim("reparam noise", mu.len(), noise.len())?;
    Ok(mu.iter().zip(log_sigma).zip(noise).map(|((&m, &s), &n)| m + s.exp() * n).collect())
}

pub fn reparam_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var, noise: Var) -> Var {
    let sigma = g.exp(log_sigma);
    let scaled = g.mul(sigma, noise);
    g.add(mu, scaled)
}

/// `KL(N(mu_q, diag(sigma_q^2)) || N(mu_p, I))`
/// `= 0.5 * sum_d (sigma_d^2 + (mu_q,d - mu_p,d)^2 - 1 - log sigma_d^2)`.
pub fn kl_diag_gaussian<T: Scalar>(mu_q: &[T], log_sigma_q: &[T], mu_p: &[T]) -> Result<T> {
    check_dim("kl log_sigma", mu_q.len(), log_sigma_q.len())?;
    check_dim("kl prior mean", mu_q.len(), mu_p.len())?;
    let terms = mu_q.iter().zip(log_sigma_q).zip(mu_p).map(|((&mq, &ls), &mp)| {
        let two_ls = ls + ls;
        let d = mq - mp;
        two_ls.exp() + d * d - T::one() - two_ls
    });
    Ok(T::lit(0.5) * sum_acc(terms))
}

/// Per-row KL, `(B x latent)` inputs to a `(B x 1)` output.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu_q: Var, log_sigma_q: Var, mu_p: Var) -> Var {
    let two_ls = g.scale(log_sigma_q, T::lit(2.0));
    let var = g.exp(two_ls);
    let d = g.sub(mu_q, mu_p);
    let d2 = g.square(d);
    let a = g.add(var, d2);
    let b = g.sub(a, two_ls);
    let c = g.add_scalar(b, -T::one());
    let s = g.row_sum(c);
    g.scale(s, T::lit(0.5))
}

/// Log-density of `x` under `N(mean, diag(sigma^2))`.
pub fn diag_gaussian_log_prob(x: &[f64], mean: &[f64], sigma: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(sigma)
        .map(|((&x, &m), &s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * ln_2pi
        })
        .sum()
}

/// Per-row log-density; `sigma` is constant.
pub fn log_prob_graph(g: &mut Graph<f64>, x: Var, mean: Var, sigma: &[f64]) -> Var {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let d = g.sub(x, mean);
    let z = g.scale_cols(d, &inv);
    let z2 = g.square(z);
    let s = g.row_sum(z2);
    let half = g.scale(s, -0.5);
    let constant: f64 = sigma.iter().map(|s| -s.ln() - 0.5 * ln_2pi).sum();
    g.add_scalar(half, constant)
}
