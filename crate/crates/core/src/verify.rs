//! Property and oracle suite behind the `verify` command.
//!
//! Each check draws its own random instances from a ChaCha8 stream keyed by
//! the suite seed and the check's position, so reports are reproducible and
//! checks are independent of each other.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, LabelIndex};
use crate::error::Result;
use crate::fusion::{
    self, beta_oracle_grid_search, closed_form_beta, computable_beta, kl_additivity_check, scaled_curvature,
    verify_constraint, verify_delta_relation, BetaVector, DiagGaussian, FusionConfig, QuadraticLoss, CLIP_HI,
    CLIP_LO,
};
use crate::model::{Adapter, Backbone, BackboneSpec, Head, Layout, ParameterVector};
use crate::numerics::{finite_diff_check, Tensor};
use crate::stats::{compute_fisher_diagonal, compute_gradient, FusionStatistics, TaskObjective};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replaces the β clip range used by the clipping check. Test hook.
    pub clip_override: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not run to completion.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line per check, then a verdict line.
    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = format!("verify seed={}\n", self.seed);
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  n={:<5} residual={:.3e} tol={:.1e}  {}",
                c.name,
                c.instances,
                c.residual,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" },
            );
            if let Some(e) = &c.error {
                let _ = writeln!(out, "{:<width$}  error: {e}", "");
            }
        }
        let failed = self.failures().count();
        let _ = writeln!(
            out,
            "{} of {} checks passed",
            self.checks.len() - failed,
            self.checks.len()
        );
        out
    }
}

type CheckFn = fn(&mut ChaCha8Rng, &VerifyOptions) -> Result<(usize, f64)>;

/// `(name, tolerance, check)`; the check returns `(instances, residual)`.
const CHECKS: &[(&str, f64, CheckFn)] = &[
    ("fusion_constraint", 1e-10, check_constraint),
    ("delta_relation", 1e-10, check_delta_relation),
    ("beta_grid_oracle", 2e-5, check_grid_oracle),
    ("beta_closed_vs_computable", 1e-12, check_closed_vs_computable),
    ("kl_additivity", 1e-10, check_kl_additivity),
    ("running_average", 1e-12, check_running_average),
    ("autodiff_vs_finite_diff", 1e-4, check_autodiff),
    ("fisher_oracle", 1e-12, check_fisher_oracle),
    ("beta_clipping", 0.0, check_clipping),
    ("gamma_reduction", 0.0, check_gamma_reduction),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check. Errors inside a check count as a failure with an
/// infinite residual.
pub fn run_suite(opts: &VerifyOptions) -> VerifyReport {
    let checks = (0..CHECKS.len()).map(|i| run_index(i, opts)).collect();
    VerifyReport { seed: opts.seed, checks }
}

/// Runs a single named check with the same RNG stream the suite gives it.
pub fn run_check(name: &str, opts: &VerifyOptions) -> Option<CheckResult> {
    CHECKS.iter().position(|c| c.0 == name).map(|i| run_index(i, opts))
}

fn run_index(i: usize, opts: &VerifyOptions) -> CheckResult {
    let (name, tolerance, f) = CHECKS[i];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(i as u64);
    let (instances, residual, error) = match f(&mut rng, opts) {
        Ok((n, r)) => (n, r, None),
        Err(e) => (0, f64::INFINITY, Some(e.to_string())),
    };
    CheckResult {
        name,
        instances,
        residual,
        tolerance,
        passed: error.is_none() && residual <= tolerance,
        error,
    }
}

const FUSION_INSTANCES: usize = 1000;
const FUSION_DIM: usize = 100;

fn flat_layout(n: usize) -> Layout {
    Layout::for_adapter(1, n, 1)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Three random adapters and a clipped β on a `2n`-long flat layout.
fn fusion_instance(rng: &mut ChaCha8Rng) -> Result<[ParameterVector; 4]> {
    let layout = flat_layout(FUSION_DIM / 2);
    let n = layout.len();
    let mut v = |lo, hi| ParameterVector::new(layout.clone(), uniform(rng, n, lo, hi));
    Ok([v(-2.0, 2.0)?, v(-2.0, 2.0)?, v(-2.0, 2.0)?, v(0.0, 0.5)?])
}

fn check_constraint(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    let mut worst: f64 = 0.0;
    for _ in 0..FUSION_INSTANCES {
        let [p, prev, t, raw] = fusion_instance(rng)?;
        let beta = BetaVector::clipped(raw, CLIP_LO, CLIP_HI);
        let star = fusion::fuse(&p, &prev, &t, &beta)?;
        worst = worst.max(verify_constraint(&p, &prev, &t, &star, &beta)?);
    }
    Ok((FUSION_INSTANCES, worst))
}

fn check_delta_relation(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    let mut worst: f64 = 0.0;
    for _ in 0..FUSION_INSTANCES {
        let [p, prev, t, raw] = fusion_instance(rng)?;
        let beta = BetaVector::clipped(raw, CLIP_LO, CLIP_HI);
        worst = worst.max(verify_delta_relation(&p, &prev, &t, &beta)?);
    }
    Ok((FUSION_INSTANCES, worst))
}

/// Exact quadratics whose closed-form minimiser lies strictly inside (0, 1).
fn check_grid_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const INSTANCES: usize = 50;
    const RESOLUTION: usize = 100_000;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < INSTANCES {
        let (p, prev, t): (f64, f64, f64) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let d = p + prev - 2.0 * t;
        if d.abs() < 0.05 {
            continue;
        }
        let loss = QuadraticLoss {
            center: t,
            value_at_center: rng.random_range(0.0..1.0),
            slope: rng.random_range(-0.95..0.95) * d.abs(),
            curvature: rng.random_range(1.0..6.0),
        };
        let grid = beta_oracle_grid_search(p, prev, t, &loss, RESOLUTION);
        let closed = closed_form_beta(d, loss.slope, loss.curvature);
        worst = worst.max((grid - closed).abs());
        done += 1;
    }
    Ok((INSTANCES, worst))
}

fn random_statistics(rng: &mut ChaCha8Rng, layout: &Layout) -> Result<FusionStatistics> {
    let n = layout.len();
    let grad = uniform(rng, n, -1.0, 1.0);
    let scale: f64 = rng.random_range(1e-4..10.0);
    let fisher = (0..n).map(|_| scale * rng.random_range(0.0f64..1.0).powi(2)).collect();
    FusionStatistics::new(
        ParameterVector::new(layout.clone(), grad)?,
        ParameterVector::new(layout.clone(), fisher)?,
    )
}

/// Closed form with the Fisher-scaled curvature plugged in, against the
/// direct computable expression; relative to `max(|beta|, 1)`.
fn check_closed_vs_computable(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const INSTANCES: usize = 100;
    let layout = flat_layout(32);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let stats = random_statistics(rng, &layout)?;
        let alpha = rng.random_range(0.1..3.0);
        let h = scaled_curvature(stats.fisher.data(), stats.f_min, stats.f_mean, alpha);
        for i in 0..layout.len() {
            let d = rng.random_range(0.05..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let g = stats.grad.data()[i];
            let a = closed_form_beta(d, g, h.values[i]);
            let b = computable_beta(d, g, stats.fisher.data()[i], stats.f_min, stats.f_mean, alpha);
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    Ok((INSTANCES, worst))
}

fn check_kl_additivity(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const INSTANCES: usize = 100;
    let gauss = |rng: &mut ChaCha8Rng, n: usize| DiagGaussian::new(uniform(rng, n, -3.0, 3.0), uniform(rng, n, 0.05, 4.0));
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let shared = rng.random_range(1..8);
        let task = rng.random_range(1..8);
        let (qs, pi) = (gauss(rng, shared)?, gauss(rng, shared)?);
        let (qg, qp) = (gauss(rng, task)?, gauss(rng, task)?);
        worst = worst.max(kl_additivity_check(&qs, &pi, &qg, &qp)?);
    }
    Ok((INSTANCES, worst))
}

/// Recursive mean against the batch mean for every length 1..=50, relative
/// to the largest input magnitude.
fn check_running_average(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const MAX_LEN: usize = 50;
    let layout = flat_layout(8);
    let n = layout.len();
    let mut worst: f64 = 0.0;
    for len in 1..=MAX_LEN {
        let seq: Vec<Vec<f64>> = (0..len).map(|_| uniform(rng, n, -5.0, 5.0)).collect();
        let mut avg = ParameterVector::zeros(&layout);
        for (t, x) in seq.iter().enumerate() {
            avg = fusion::update_running_average(&avg, &ParameterVector::new(layout.clone(), x.clone())?, t + 1)?;
        }
        let scale = seq.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let batch = seq.iter().map(|x| x[i]).sum::<f64>() / len as f64;
            worst = worst.max((avg.data()[i] - batch).abs() / scale);
        }
    }
    Ok((MAX_LEN, worst))
}

struct ModelInstance {
    backbone: Backbone,
    head: Head,
    labels: LabelIndex,
    adapter: Adapter,
    data: Dataset,
}

/// A small frozen backbone, head, adapter and labelled batch. Odd `k` uses
/// a linear head, even `k` a cosine head.
fn model_instance(rng: &mut ChaCha8Rng, k: usize) -> Result<ModelInstance> {
    let spec = BackboneSpec {
        input_dim: rng.random_range(2..6),
        feature_dim: rng.random_range(3..6),
        num_blocks: rng.random_range(1..3),
    };
    let rank = rng.random_range(1..3);
    let classes = rng.random_range(2..4);
    let rows = rng.random_range(2..7);
    let backbone = Backbone::init(spec, rng.random())?.freeze();
    let head = if k % 2 == 1 {
        Head::init(spec.feature_dim, classes, rng.random())
    } else {
        Head::cosine(spec.feature_dim, classes, rng.random_range(1.0..16.0), rng.random())
    };
    let mut adapter = Adapter::init_random(spec.num_blocks, spec.feature_dim, rank, rng.random())?.flatten();
    // Non-zero up-projections so every coordinate has a gradient path.
    adapter = adapter.with_data(uniform(rng, adapter.len(), -0.5, 0.5))?;
    let x = Tensor::matrix(rows, spec.input_dim, uniform(rng, rows * spec.input_dim, -2.0, 2.0))?;
    let labels: Vec<u32> = (0..rows).map(|_| rng.random_range(0..classes as u32)).collect();
    Ok(ModelInstance {
        backbone,
        head,
        labels: LabelIndex::new(0..classes as u32),
        adapter: Adapter::unflatten(&adapter)?,
        data: Dataset::new(x, labels)?,
    })
}

fn check_autodiff(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const CONFIGS: usize = 24;
    let mut worst: f64 = 0.0;
    for k in 0..CONFIGS {
        let m = model_instance(rng, k)?;
        let objective = TaskObjective::new(&m.backbone, &m.head, &m.labels);
        let flat = m.adapter.flatten();
        let x = m.data.inputs()?;
        let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            let a = Adapter::unflatten(&flat.with_data(theta.to_vec())?)?;
            let (loss, grad) = objective.loss_and_gradient(&a, &x, m.data.labels())?;
            Ok((loss, grad.into_data()))
        };
        worst = worst.max(finite_diff_check(f, flat.data(), 1e-6)?);
    }
    Ok((CONFIGS, worst))
}

/// Fisher diagonal and mean gradient against a plain per-sample loop.
fn check_fisher_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    const CONFIGS: usize = 20;
    let mut worst: f64 = 0.0;
    for k in 0..CONFIGS {
        let m = model_instance(rng, k)?;
        let objective = TaskObjective::new(&m.backbone, &m.head, &m.labels);
        let fisher = compute_fisher_diagonal(&objective, &m.adapter, &m.data)?;
        let grad = compute_gradient(&objective, &m.adapter, &m.data)?;
        let n = m.data.len();
        let mut sq = vec![0.0; fisher.len()];
        let mut sum = vec![0.0; fisher.len()];
        for i in 0..n {
            let (x, y) = m.data.gather(&[i])?;
            let (_, g) = objective.loss_and_gradient(&m.adapter, &x, &y)?;
            for (j, v) in g.data().iter().enumerate() {
                sq[j] += v * v;
                sum[j] += v;
            }
        }
        for j in 0..fisher.len() {
            worst = worst.max((fisher.data()[j] - sq[j] / n as f64).abs());
            worst = worst.max((grad.data()[j] - sum[j] / n as f64).abs());
        }
    }
    Ok((CONFIGS, worst))
}

/// Distance of any computed β from the admissible range `[CLIP_LO, CLIP_HI]`.
fn check_clipping(rng: &mut ChaCha8Rng, opts: &VerifyOptions) -> Result<(usize, f64)> {
    const INSTANCES: usize = 100;
    let range = opts.clip_override.unwrap_or((CLIP_LO, CLIP_HI));
    let cfg = FusionConfig::default();
    let layout = flat_layout(FUSION_DIM / 2);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = layout.len();
        let v = |rng: &mut ChaCha8Rng| ParameterVector::new(layout.clone(), uniform(rng, n, -2.0, 2.0));
        let (p, prev, t) = (v(rng)?, v(rng)?, v(rng)?);
        let stats = random_statistics(rng, &layout)?;
        let out = fusion::compute_beta_with_clip(&p, &prev, &t, &stats, &cfg, range)?;
        for &b in out.beta.values() {
            worst = worst.max(CLIP_LO - b).max(b - CLIP_HI);
        }
    }
    Ok((INSTANCES, worst))
}

/// Number of coordinates where γ = 0.5 differs bitwise from plain fusion.
fn check_gamma_reduction(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<(usize, f64)> {
    let mut mismatches = 0usize;
    for _ in 0..FUSION_INSTANCES {
        let [p, prev, t, raw] = fusion_instance(rng)?;
        let beta = BetaVector::clipped(raw, CLIP_LO, CLIP_HI);
        let a = fusion::fuse(&p, &prev, &t, &beta)?;
        let b = fusion::fuse_gamma(&p, &prev, &t, &beta, 0.5)?;
        mismatches += a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    Ok((FUSION_INSTANCES, mismatches as f64))
}
