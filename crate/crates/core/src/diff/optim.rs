//! Adam optimiser.

use serde::{Deserialize, Serialize};

use super::nn::Parameterized;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads` follow `model.tensors()` order.
    pub fn step(&mut self, model: &mut impl Parameterized<T>, mut grads: Vec<Mat<T>>) -> Result<()> {
        let mut sq = 0.0;
        for g in &grads {
            if !g.is_finite() {
                return Err(Error::Divergence("non-finite gradient".into()));
            }
            sq += g.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        if let Some(c) = self.cfg.clip_norm {
            let norm = sq.sqrt();
            if norm > c {
                let s = T::lit(c / norm);
                for g in &mut grads {
                    g.data.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let mut params = model.tensors_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect();
            self.v = self.m.clone();
        }
        assert_eq!(params.len(), grads.len(), "gradient count");
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(self.cfg.lr * c2.sqrt() / c1);
        let eps = T::lit(self.cfg.eps * c2.sqrt());
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.value.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
