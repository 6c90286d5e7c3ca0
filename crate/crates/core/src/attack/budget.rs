//! Observation normalisation and the ℓ∞ perturbation budget.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{check_dim, Error, Result};

/// Per-dimension affine map into normalised observation units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as this value.
pub const MIN_STD: f64 = 1e-6;

impl ObsNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population mean and standard deviation over `observations`.
    pub fn fit<'a>(observations: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for o in observations {
            if n == 0 {
                sum = vec![0.0; o.len()];
                sq = vec![0.0; o.len()];
            }
            check_dim("normalizer observation", sum.len(), o.len())?;
            for (i, &v) in o.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset("normalizer fit"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, o: &[f64]) -> Vec<f64> {
        o.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| m + s * v).collect()
    }

    /// `(B x d)` normalised rows to raw observation rows.
    pub fn denormalize_graph(&self, g: &mut Graph<f64>, x: Var) -> Var {
        g.affine_cols(x, &self.std, &self.mean)
    }
}

/// `ô` is admissible iff `|ô_i - o_i| / std_i <= epsilon` for every `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
}

/// Slack allowed by budget checks.
pub const BUDGET_TOL: f64 = 1e-6;

impl AttackBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Invalid(format!("attack epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    /// Normalised ℓ∞ distance between two raw observations.
    pub fn distance(norm: &ObsNormalizer, o_hat: &[f64], o: &[f64]) -> f64 {
        o_hat.iter().zip(o).zip(&norm.std).map(|((a, b), s)| (a - b).abs() / s).fold(0.0, f64::max)
    }

    pub fn contains(&self, norm: &ObsNormalizer, o_hat: &[f64], o: &[f64]) -> bool {
        Self::distance(norm, o_hat, o) <= self.epsilon + BUDGET_TOL
    }

    /// Clip a raw observation into the budget around raw `o`.
    pub fn project_raw(&self, norm: &ObsNormalizer, o_hat: &[f64], o: &[f64]) -> Vec<f64> {
        o_hat
            .iter()
            .zip(o)
            .zip(&norm.std)
            .map(|((&a, &b), &s)| a.clamp(b - self.epsilon * s, b + self.epsilon * s))
            .collect()
    }
}

/// Componentwise clip of `o_hat` into `[o - epsilon, o + epsilon]`.
pub fn project_linf(o_hat: &[f64], o: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_dim("project_linf", o.len(), o_hat.len())?;
    Ok(o_hat.iter().zip(o).map(|(&a, &b)| a.clamp(b - epsilon, b + epsilon)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_componentwise() {
        assert_eq!(project_linf(&[0.2, -0.05], &[0.0, 0.0], 0.1).unwrap(), vec![0.1, -0.05]);
    }

    #[test]
    fn inside_is_unchanged() {
        let p = [0.31, -0.4];
        assert_eq!(project_linf(&p, &[0.3, -0.35], 0.1).unwrap(), p.to_vec());
    }

    #[test]
    fn dimension_mismatch_errors() {
        assert!(project_linf(&[0.0], &[0.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn budget_must_be_positive() {
        assert!(AttackBudget::new(0.0).is_err());
        assert!(AttackBudget::new(f64::NAN).is_err());
        assert!(AttackBudget::new(0.1).is_ok());
    }

    #[test]
    fn normalizer_round_trips() {
        let data = [vec![1.0, 10.0], vec![3.0, 14.0], vec![2.0, 12.0]];
        let n = ObsNormalizer::fit(data.iter().map(Vec::as_slice)).unwrap();
        assert!((n.mean[0] - 2.0).abs() < 1e-12 && (n.mean[1] - 12.0).abs() < 1e-12);
        let x = n.normalize(&[2.5, 9.0]);
        let back = n.denormalize(&x);
        assert!((back[0] - 2.5).abs() < 1e-12 && (back[1] - 9.0).abs() < 1e-12);
        assert!(ObsNormalizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn raw_projection_uses_scaled_radius() {
        let n = ObsNormalizer { mean: vec![0.0, 0.0], std: vec![1.0, 10.0] };
        let b = AttackBudget::new(0.1).unwrap();
        let p = b.project_raw(&n, &[5.0, 5.0], &[0.0, 0.0]);
        assert_eq!(p, vec![0.1, 1.0]);
        assert!(b.contains(&n, &p, &[0.0, 0.0]));
        assert!(!b.contains(&n, &[0.2, 0.0], &[0.0, 0.0]));
    }
}
