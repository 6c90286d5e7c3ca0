//! Sign-gradient ascent inside an ℓ∞ ball, batched over independent rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Mat;

/// A per-row objective over a `(B x d)` batch of inputs.
///
/// Rows must not interact: the gradient of the summed output with respect to
/// row `i` has to equal the gradient of output `i` alone.
pub trait BatchObjective {
    fn dim(&self) -> usize;
    fn batch(&self) -> usize;
    /// `(B x 1)` objective values for inputs `x`.
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var;
}

/// Objective from a closure; handy for tests and ad-hoc losses.
pub struct FnObjective<F> {
    pub dim: usize,
    pub batch: usize,
    pub f: F,
}

impl<F: Fn(&mut Graph<f64>, Var) -> Var> BatchObjective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn batch(&self) -> usize {
        self.batch
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        (self.f)(g, x)
    }
}

/// `objective(x) + weight * extra(x)` row by row.
pub struct SumObjective<'a> {
    pub base: &'a dyn BatchObjective,
    pub extra: &'a dyn BatchObjective,
    pub weight: f64,
}

impl BatchObjective for SumObjective<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn batch(&self) -> usize {
        self.base.batch()
    }
    fn build(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let a = self.base.build(g, x);
        let b = self.extra.build(g, x);
        let b = g.scale(b, self.weight);
        g.add(a, b)
    }
}

/// Row values and, optionally, the input gradient.
pub fn evaluate(obj: &dyn BatchObjective, x: &Mat<f64>, with_grad: bool) -> Result<(Vec<f64>, Option<Mat<f64>>)> {
    check_dim("objective batch", obj.batch(), x.rows)?;
    check_dim("objective dim", obj.dim(), x.cols)?;
    let mut g = Graph::new();
    let xv = if with_grad { g.param(x.clone()) } else { g.constant(x.clone()) };
    let out = obj.build(&mut g, xv);
    check_dim("objective output cols", 1, g.shape(out).1)?;
    check_dim("objective output rows", x.rows, g.shape(out).0)?;
    let values = g.value(out).data.clone();
    if !with_grad {
        return Ok((values, None));
    }
    let total = g.sum(out);
    let grads = g.backward(total)?;
    Ok((values, Some(grads.get_or_zeros(xv, x.shape()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    /// Ascent steps per run.
    pub steps: usize,
    /// Step length; `None` means `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
    /// Start the first run from a uniform point in the ball instead of the centre.
    pub random_init: bool,
    /// Total runs; runs after the first always start at a random point.
    pub restarts: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { steps: 10, step_size: None, random_init: true, restarts: 1 }
    }
}

impl PgdConfig {
    pub fn step_length(&self, epsilon: f64) -> f64 {
        self.step_size.unwrap_or(2.5 * epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("pgd steps and restarts must be at least 1".into()));
        }
        match self.step_size {
            Some(s) if !(s >= 0.0 && s.is_finite()) => Err(Error::Config(format!("pgd step size {s} is invalid"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutcome {
    /// Best point found per row.
    pub x: Mat<f64>,
    /// Objective at `x`.
    pub value: Vec<f64>,
    /// Objective at the centre.
    pub center_value: Vec<f64>,
    /// Rows that hit a non-finite gradient and were reset to the centre.
    pub fell_back: Vec<bool>,
}

fn ball_project(x: &mut [f64], c: &[f64], eps: f64) {
    for (v, &cv) in x.iter_mut().zip(c) {
        *v = v.clamp(cv - eps, cv + eps);
    }
}

/// Maximise `obj` over `{x : |x - center|_inf <= epsilon}` independently for
/// each row. Every iterate and the centre itself compete for the best value,
/// so the result is never worse than the centre.
pub fn pgd_maximize(obj: &dyn BatchObjective, center: &Mat<f64>, epsilon: f64, cfg: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<PgdOutcome> {
    cfg.validate()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("pgd epsilon {epsilon} is invalid")));
    }
    if !center.is_finite() {
        return Err(Error::NonFinite("pgd centre".into()));
    }
    let (b, d) = center.shape();
    let eta = cfg.step_length(epsilon);
    let (center_value, _) = evaluate(obj, center, false)?;
    let sanitize = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut best = center.clone();
    let mut best_value: Vec<f64> = center_value.iter().map(|&v| sanitize(v)).collect();
    let mut fell_back = vec![false; b];

    for run in 0..cfg.restarts {
        let mut x = center.clone();
        if run > 0 || cfg.random_init {
            for v in x.data.iter_mut() {
                *v += rng.gen_range(-1.0..=1.0) * epsilon;
            }
        }
        let mut active: Vec<bool> = fell_back.iter().map(|f| !f).collect();
        for k in 0..=cfg.steps {
            let with_grad = k < cfg.steps;
            let (values, grad) = evaluate(obj, &x, with_grad)?;
            for r in 0..b {
                if active[r] && sanitize(values[r]) > best_value[r] {
                    best_value[r] = values[r];
                    best.row_mut(r).copy_from_slice(x.row(r));
                }
            }
            let Some(grad) = grad else { break };
            for r in 0..b {
                if !active[r] {
                    continue;
                }
                let gr = grad.row(r);
                if gr.iter().any(|v| !v.is_finite()) {
                    active[r] = false;
                    fell_back[r] = true;
                    best.row_mut(r).copy_from_slice(center.row(r));
                    best_value[r] = center_value[r];
                    continue;
                }
                let xr = x.row_mut(r);
                for (xv, &gv) in xr.iter_mut().zip(gr) {
                    // sign(0) = 0 leaves stationary coordinates in place.
                    if gv > 0.0 {
                        *xv += eta;
                    } else if gv < 0.0 {
                        *xv -= eta;
                    }
                }
                ball_project(xr, center.row(r), epsilon);
            }
        }
    }
    debug_assert_eq!(best.cols, d);
    Ok(PgdOutcome { x: best, value: best_value, center_value, fell_back })
}
