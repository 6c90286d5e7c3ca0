//! Evaluation metrics and the report they fill.

use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, ObsNormalizer};
use crate::error::{check_dim, Error, Result};
use crate::shield::LatentMode;

/// A number, or the reason it cannot be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Value(f64),
    Undefined(String),
}

impl Metric {
    pub fn undefined(reason: &str) -> Self {
        Metric::Undefined(reason.to_string())
    }

    /// `num / den`, undefined when `den` is zero.
    pub fn ratio(num: f64, den: f64, reason: &str) -> Self {
        if den == 0.0 {
            Metric::undefined(reason)
        } else {
            Metric::Value(num / den)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined(_) => None,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v}"),
            Metric::Undefined(r) => write!(f, "undefined ({r})"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScores {
    pub confusion: Confusion,
    /// `TN / (TN + FP)`: accuracy on clean steps.
    pub accuracy_clean: Metric,
    pub f1: Metric,
    /// `FN / (FN + TP)`.
    pub fnr: Metric,
}

/// Confusion-matrix scores with attacked steps as the positive class.
pub fn score_detector(labels: &[bool], verdicts: &[bool]) -> Result<DetectorScores> {
    check_dim("detector verdicts", labels.len(), verdicts.len())?;
    let mut c = Confusion::default();
    for (&l, &v) in labels.iter().zip(verdicts) {
        match (l, v) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    let positives = (c.tp + c.fn_) as f64;
    let f1 = if positives == 0.0 {
        Metric::undefined("no attacked steps")
    } else {
        // Equals 2PR / (P + R) whenever precision is defined, and 0 when nothing is flagged.
        Metric::Value(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
    };
    Ok(DetectorScores {
        confusion: c,
        accuracy_clean: Metric::ratio(c.tn as f64, (c.tn + c.fp) as f64, "no clean steps"),
        f1,
        fnr: Metric::ratio(c.fn_ as f64, positives, "no attacked steps"),
    })
}

/// Mean absolute error over steps and dimensions, in normalised units.
pub fn score_denoiser(clean: &[Vec<f64>], denoised: &[Vec<f64>], norm: &ObsNormalizer) -> Result<Metric> {
    check_dim("denoised steps", clean.len(), denoised.len())?;
    let (mut total, mut n) = (0.0, 0usize);
    for (c, d) in clean.iter().zip(denoised) {
        check_dim("denoised observation", c.len(), d.len())?;
        check_dim("normalizer", norm.dim(), c.len())?;
        for i in 0..c.len() {
            total += ((d[i] - c[i]) / norm.std[i]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { Metric::undefined("no steps") } else { Metric::Value(total / n as f64) })
}

/// Returns of one evaluation cell, in seed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    /// Population standard deviation over rollouts.
    pub std: f64,
    pub seeds: Vec<u64>,
    pub returns: Vec<f64>,
}

impl CellStats {
    pub fn new(seeds: Vec<u64>, returns: Vec<f64>) -> Result<Self> {
        check_dim("cell returns", seeds.len(), returns.len())?;
        if returns.is_empty() {
            return Err(Error::EmptyDataset("evaluation cell"));
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { mean, std, seeds, returns })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub env: String,
    pub algo: String,
    pub epsilon: f64,
    pub horizon: usize,
    pub normal_trajectories: usize,
    pub rollouts: usize,
    pub seed: u64,
    /// Sizes the desk defaults are scaled from.
    pub reference_trajectories: usize,
    pub reference_horizon: usize,
    pub c_anomaly: f64,
    pub c_vul: Option<f64>,
    pub latent_mode: Option<LatentMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRow {
    pub undefended: CellStats,
    pub defended: CellStats,
    /// Defended over undefended clean return.
    pub retention: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: AttackKind,
    pub undefended: CellStats,
    pub defended: CellStats,
    /// Fraction of undefended steps the attack perturbed.
    pub attack_frequency: f64,
    /// Largest normalised ℓ∞ perturbation delivered in either cell.
    pub max_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg: f64,
    pub min: f64,
    /// Attack reaching `min`.
    pub best_attack: AttackKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub undefended: Aggregate,
    pub defended: Aggregate,
}

fn aggregate(rows: &[AttackRow], pick: impl Fn(&AttackRow) -> f64) -> Option<Aggregate> {
    let best = rows.iter().min_by(|a, b| pick(a).total_cmp(&pick(b)).then(a.attack.cmp(&b.attack)))?;
    Some(Aggregate { avg: rows.iter().map(&pick).sum::<f64>() / rows.len() as f64, min: pick(best), best_attack: best.attack })
}

impl Summary {
    /// Average and minimum mean return over attack rows; `None` without attacks.
    pub fn from_rows(rows: &[AttackRow]) -> Option<Self> {
        Some(Self { undefended: aggregate(rows, |r| r.undefended.mean)?, defended: aggregate(rows, |r| r.defended.mean)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub attack: AttackKind,
    pub f1: Metric,
    pub fnr: Metric,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTable {
    pub accuracy_clean: Metric,
    pub per_attack: Vec<DetectorRow>,
}

impl Default for DetectorTable {
    fn default() -> Self {
        Self { accuracy_clean: Metric::undefined("not evaluated"), per_attack: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserRow {
    pub attack: AttackKind,
    /// Denoiser output against the clean observation, on perturbed steps of
    /// defended rollouts.
    pub mae: Metric,
    /// Attacked observation against the clean one, same steps.
    pub attacked_mae: Metric,
    /// Offline held-out pairs, offline attacks only.
    pub heldout_mae: Metric,
    pub heldout_attacked_mae: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRow {
    pub attack: AttackKind,
    /// Mean defended return under the defense-unaware attack.
    pub defended: f64,
    pub adaptive: CellStats,
    /// `(adaptive - defended) / defended`.
    pub change: Metric,
    pub max_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub cell: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ScoreHistogram {
    /// `bins` equal-width bins over `[0, hi]`; values above `hi` land in the last bin.
    pub fn new(cell: &str, scores: &[f64], hi: f64, bins: usize) -> Self {
        let hi = if hi > 0.0 { hi } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &s in scores {
            let b = ((s / hi) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        Self { cell: cell.to_string(), edges, counts }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub clean: Option<CleanRow>,
    pub attacks: Vec<AttackRow>,
    pub summary: Option<Summary>,
    pub detector: DetectorTable,
    pub denoiser: Vec<DenoiserRow>,
    pub adaptive: Vec<AdaptiveRow>,
    pub score_histograms: Vec<ScoreHistogram>,
}

impl MetricsReport {
    /// Every rollout in the report, as `(cell, seed)`.
    pub fn rollout_cells(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        let mut add = |cell: String, c: &CellStats| out.extend(c.seeds.iter().map(|&s| (cell.clone(), s)));
        if let Some(c) = &self.clean {
            add("clean/undefended".into(), &c.undefended);
            add("clean/defended".into(), &c.defended);
        }
        for r in &self.attacks {
            add(format!("{}/undefended", r.attack), &r.undefended);
            add(format!("{}/defended", r.attack), &r.defended);
        }
        for r in &self.adaptive {
            add(format!("{}/adaptive", r.attack), &r.adaptive);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_verdicts() {
        let l = [true, false, true, true, false];
        let s = score_detector(&l, &l).unwrap();
        assert_eq!(s.f1, Metric::Value(1.0));
        assert_eq!(s.fnr, Metric::Value(0.0));
        assert_eq!(s.accuracy_clean, Metric::Value(1.0));
    }

    #[test]
    fn hand_confusion_matrix() {
        let s = score_detector(&[true, true, false, false], &[true, false, false, true]).unwrap();
        assert_eq!(s.confusion, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        // P = R = 1/2, so F1 = 2PR/(P+R) = 1/2.
        let (p, r) = (0.5, 0.5);
        assert_eq!(s.f1, Metric::Value(2.0 * p * r / (p + r)));
        assert_eq!(s.fnr, Metric::Value(0.5));
    }

    #[test]
    fn degenerate_classes_are_undefined() {
        let s = score_detector(&[false, false, false], &[false, true, false]).unwrap();
        assert!(matches!(s.f1, Metric::Undefined(_)));
        assert!(matches!(s.fnr, Metric::Undefined(_)));
        assert_eq!(s.accuracy_clean, Metric::Value(2.0 / 3.0));
        assert!(score_detector(&[true], &[true, false]).is_err());
    }

    #[test]
    fn denoiser_mae_edge_cases() {
        let n = ObsNormalizer { mean: vec![5.0, -1.0], std: vec![2.0, 0.5] };
        let c = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(score_denoiser(&c, &c, &n).unwrap(), Metric::Value(0.0));
        // An offset of 0.3 normalised units in every coordinate.
        let shifted: Vec<Vec<f64>> = c.iter().map(|o| vec![o[0] + 0.6, o[1] - 0.15]).collect();
        assert!((score_denoiser(&c, &shifted, &n).unwrap().value().unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(score_denoiser(&[], &[], &n).unwrap(), Metric::Undefined(_)));
    }

    #[test]
    fn metric_serializes_with_reason() {
        let j = serde_json::to_string(&Metric::undefined("no attacked steps")).unwrap();
        assert_eq!(j, r#"{"undefined":"no attacked steps"}"#);
        assert_eq!(serde_json::to_string(&Metric::Value(0.25)).unwrap(), r#"{"value":0.25}"#);
    }

    #[test]
    fn histogram_counts_every_score() {
        let h = ScoreHistogram::new("x", &[0.0, 0.49, 0.5, 1.0, 7.0], 1.0, 2);
        assert_eq!(h.counts, vec![2, 3]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
    }
}
