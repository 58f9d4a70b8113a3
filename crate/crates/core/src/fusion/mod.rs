//! Fisher-scaled fusion of task adapters into one global adapter.
//!
//! After task `t` the global adapter becomes
//! `beta * theta_p + beta * theta_prev + (1 - 2 beta) * theta_t`, with a
//! per-parameter `beta` obtained in closed form from the post-training
//! gradient and a curvature estimate built from the empirical Fisher
//! diagonal. `theta_p` is the task adapter's initialisation and
//! `theta_prev` the global adapter before the task.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::stats::{FisherScope, FusionStatistics};

pub use oracle::{
    beta_oracle_grid_search, kl_additivity_check, kl_divergence, verify_constraint,
    verify_delta_relation, DiagGaussian, QuadraticLoss,
};

pub const DEFAULT_ALPHA: f64 = 1.25;
pub const CLIP_LO: f64 = 0.001;
pub const CLIP_HI: f64 = 0.499;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Spread of the curvature estimate, which ranges over `[1, 1 + alpha]`.
    pub alpha: f64,
    /// Weight split between `theta_p` and `theta_prev`; 0.5 is the plain rule.
    pub gamma: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// `|D|` below this falls back to `1 / (curvature + 1)`.
    pub denom_epsilon: f64,
    pub fisher_scope: FisherScope,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: 0.5,
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
            denom_epsilon: 1e-12,
            fisher_scope: FisherScope::Global,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        check_gamma(self.gamma)?;
        if !(self.clip_lo < self.clip_hi && self.clip_hi < 0.5) {
            return Err(Error::config(format!(
                "clip range [{}, {}] must satisfy lo < hi < 0.5",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.denom_epsilon >= 0.0) {
            return Err(Error::config("denom_epsilon must be non-negative"));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Element-wise fusion coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaVector(ParameterVector);

impl BetaVector {
    /// Clips every entry into `[lo, hi]`.
    pub fn clipped(raw: ParameterVector, lo: f64, hi: f64) -> Self {
        let data = raw.data().iter().map(|b| b.clamp(lo, hi)).collect();
        Self(raw.with_data(data).expect("same length"))
    }

    /// Wraps coefficients as given, without clipping. Intended for
    /// constant-coefficient baselines and limit checks.
    pub fn unclipped(values: ParameterVector) -> Self {
        Self(values)
    }

    /// The same coefficient for every parameter of `layout_of`.
    pub fn constant(layout_of: &ParameterVector, value: f64) -> Self {
        Self(ParameterVector::new(layout_of.layout().clone(), vec![value; layout_of.len()]).expect("same layout"))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_vector(&self) -> &ParameterVector {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_within(&self, lo: f64, hi: f64) -> bool {
        self.values().iter().all(|b| (lo..=hi).contains(b))
    }
}

/// Per-task summary of a coefficient computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Raw coefficients raised to `clip_lo`.
    pub clipped_low: usize,
    /// Raw coefficients lowered to `clip_hi`.
    pub clipped_high: usize,
    /// Coordinates where `|D|` was too small and `1 / (curvature + 1)` was used.
    pub denominator_fallbacks: usize,
    /// `F_mean == F_min`; curvature was set to the midpoint `1 + alpha / 2`.
    pub degenerate_fisher: bool,
}

impl BetaReport {
    fn from_values(beta: &BetaVector, raw: &[f64], cfg: &FusionConfig, fallbacks: usize, degenerate: bool) -> Self {
        let v = beta.values();
        let (min, max) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)));
        Self {
            count: v.len(),
            min,
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            max,
            clipped_low: raw.iter().filter(|&&b| b < cfg.clip_lo).count(),
            clipped_high: raw.iter().filter(|&&b| b > cfg.clip_hi).count(),
            denominator_fallbacks: fallbacks,
            degenerate_fisher: degenerate,
        }
    }
}

/// Output of [`compute_beta`].
#[derive(Debug, Clone, PartialEq)]
pub struct BetaOutcome {
    pub beta: BetaVector,
    /// Coefficients before clipping.
    pub raw: Vec<f64>,
    pub report: BetaReport,
}

/// Curvature estimate together with its degeneracy flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// `alpha * (F - F_min) / (F_mean - F_min) + 1`, element-wise.
///
/// When `F_mean == F_min` every entry is `1 + alpha / 2`.
pub fn scaled_curvature(fisher: &[f64], f_min: f64, f_mean: f64, alpha: f64) -> Curvature {
    let spread = f_mean - f_min;
    if !(spread > 0.0) {
        return Curvature {
            values: vec![1.0 + alpha / 2.0; fisher.len()],
            degenerate: true,
        };
    }
    Curvature {
        values: fisher.iter().map(|f| alpha * (f - f_min) / spread + 1.0).collect(),
        degenerate: false,
    }
}

/// `(D - g) / (D (h + 1))` for one coordinate, where
/// `D = theta_p + theta_prev - 2 theta_t`, `g` the gradient and `h` the
/// curvature.
pub fn closed_form_beta(d: f64, grad: f64, curvature: f64) -> f64 {
    (d - grad) / (d * (curvature + 1.0))
}

/// The same coefficient with the Fisher scaling substituted in:
/// `(F_mean - F_min)(D - g) / (D (alpha F - alpha F_min + 2 F_mean - 2 F_min))`.
pub fn computable_beta(d: f64, grad: f64, fisher: f64, f_min: f64, f_mean: f64, alpha: f64) -> f64 {
    ((f_mean - f_min) * (d - grad))
        / (d * (alpha * fisher - alpha * f_min + 2.0 * f_mean - 2.0 * f_min))
}

fn check_layouts(vs: &[&ParameterVector]) -> Result<()> {
    for w in vs.windows(2) {
        w[0].ensure_same_layout(w[1])?;
    }
    Ok(())
}

/// Coefficients for one task, clipped to `[cfg.clip_lo, cfg.clip_hi]`.
pub fn compute_beta(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    stats: &FusionStatistics,
    cfg: &FusionConfig,
) -> Result<BetaOutcome> {
    compute_beta_with_clip(theta_p, theta_prev, theta_t, stats, cfg, (cfg.clip_lo, cfg.clip_hi))
}

/// [`compute_beta`] with an explicit clip range; the range is not validated.
pub fn compute_beta_with_clip(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    stats: &FusionStatistics,
    cfg: &FusionConfig,
    (lo, hi): (f64, f64),
) -> Result<BetaOutcome> {
    check_layouts(&[theta_p, theta_prev, theta_t, &stats.grad, &stats.fisher])?;
    let bounds = stats.scope_bounds(cfg.fisher_scope)?;
    let mut raw = Vec::with_capacity(theta_t.len());
    let mut fallbacks = 0;
    let mut degenerate = false;
    for i in 0..theta_t.len() {
        let d = theta_p.data()[i] + theta_prev.data()[i] - 2.0 * theta_t.data()[i];
        let g = stats.grad.data()[i];
        let f = stats.fisher.data()[i];
        let (f_min, f_mean) = bounds[i];
        let spread_ok = f_mean - f_min > 0.0;
        degenerate |= !spread_ok;
        let beta = if d.abs() < cfg.denom_epsilon {
            fallbacks += 1;
            let h = scaled_curvature(&[f], f_min, f_mean, cfg.alpha).values[0];
            1.0 / (h + 1.0)
        } else if spread_ok {
            computable_beta(d, g, f, f_min, f_mean, cfg.alpha)
        } else {
            closed_form_beta(d, g, 1.0 + cfg.alpha / 2.0)
        };
        raw.push(beta);
    }
    let beta = BetaVector::clipped(theta_t.with_data(raw.clone())?, lo, hi);
    let clip_cfg = FusionConfig {
        clip_lo: lo,
        clip_hi: hi,
        ..cfg.clone()
    };
    let report = BetaReport::from_values(&beta, &raw, &clip_cfg, fallbacks, degenerate);
    Ok(BetaOutcome { beta, raw, report })
}

/// `beta * theta_p + beta * theta_prev + (1 - 2 beta) * theta_t`, evaluated
/// as `theta_t + beta * D` with `D = theta_p + theta_prev - 2 theta_t`, so
/// fusing three equal adapters returns the input exactly.
pub fn fuse(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    beta: &BetaVector,
) -> Result<ParameterVector> {
    check_layouts(&[theta_p, theta_prev, theta_t, beta.as_vector()])?;
    let out = (0..theta_t.len())
        .map(|i| {
            let t = theta_t.data()[i];
            t + beta.values()[i] * (theta_p.data()[i] + theta_prev.data()[i] - 2.0 * t)
        })
        .collect();
    theta_t.with_data(out)
}

/// `2 gamma beta theta_p + 2 (1 - gamma) beta theta_prev + (1 - 2 beta) theta_t`,
/// in the same `theta_t + beta * (...)` form as [`fuse`].
///
/// `gamma = 0.5` reproduces [`fuse`] bit for bit.
pub fn fuse_gamma(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    beta: &BetaVector,
    gamma: f64,
) -> Result<ParameterVector> {
    check_gamma(gamma)?;
    check_layouts(&[theta_p, theta_prev, theta_t, beta.as_vector()])?;
    let (wp, wprev) = (2.0 * gamma, 2.0 * (1.0 - gamma));
    let out = (0..theta_t.len())
        .map(|i| {
            let t = theta_t.data()[i];
            t + beta.values()[i] * (wp * theta_p.data()[i] + wprev * theta_prev.data()[i] - 2.0 * t)
        })
        .collect();
    theta_t.with_data(out)
}

/// Running mean after task `t` (1-based): `((t-1)/t) avg + (1/t) theta_t`.
pub fn update_running_average(
    theta_avg_prev: &ParameterVector,
    theta_t: &ParameterVector,
    t: usize,
) -> Result<ParameterVector> {
    if t == 0 {
        return Err(Error::contract("running average is defined for t >= 1"));
    }
    theta_avg_prev.ensure_same_layout(theta_t)?;
    let keep = (t - 1) as f64 / t as f64;
    let add = 1.0 / t as f64;
    let out = theta_avg_prev
        .data()
        .iter()
        .zip(theta_t.data())
        .map(|(a, x)| keep * a + add * x)
        .collect();
    theta_t.with_data(out)
}

/// Adapter-shaped state retained across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub theta_star: ParameterVector,
    pub theta_avg: ParameterVector,
    /// Number of tasks absorbed so far.
    pub task_index: usize,
}

impl GlobalState {
    pub fn new(init: ParameterVector) -> Self {
        Self {
            theta_avg: init.clone(),
            theta_star: init,
            task_index: 0,
        }
    }

    /// Installs a new global adapter for the next task, folds `theta_t`
    /// into the running average and consumes it.
    pub fn absorb(&mut self, theta_star: ParameterVector, theta_t: ParameterVector) -> Result<()> {
        self.theta_star.ensure_same_layout(&theta_star)?;
        let t = self.task_index + 1;
        let avg = update_running_average(&self.theta_avg, &theta_t, t)?;
        self.theta_star = theta_star;
        self.theta_avg = avg;
        self.task_index = t;
        Ok(())
    }
}
