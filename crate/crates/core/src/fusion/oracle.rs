//! Independent checks on the fusion rule: algebraic identities, a brute-force
//! minimiser for the scalar coefficient, and KL additivity for factorised
//! diagonal Gaussians.

use crate::error::{Error, Result};
use crate::model::ParameterVector;

use super::{fuse, BetaVector};

fn max_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

/// Residual of the stability constraint
/// `delta + theta_prev + theta_p - theta_t - theta_star = 0`, with the shift
/// `delta = (beta - 1)(theta_p + theta_prev - 2 theta_t)` taken from the
/// coefficients rather than from `theta_star`.
pub fn verify_constraint(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    theta_star: &ParameterVector,
    beta: &BetaVector,
) -> Result<f64> {
    for v in [theta_prev, theta_t, theta_star, beta.as_vector()] {
        theta_p.ensure_same_layout(v)?;
    }
    Ok(max_abs((0..theta_p.len()).map(|i| {
        let (p, prev, t, star) = (
            theta_p.data()[i],
            theta_prev.data()[i],
            theta_t.data()[i],
            theta_star.data()[i],
        );
        let delta = (beta.values()[i] - 1.0) * (p + prev - 2.0 * t);
        delta + prev + p - t - star
    })))
}

/// Residual of `theta_star - theta_t = beta / (beta - 1) * delta`, where
/// `theta_star` comes from [`fuse`] and
/// `delta = theta_star - theta_prev + theta_t - theta_p`.
pub fn verify_delta_relation(
    theta_p: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_t: &ParameterVector,
    beta: &BetaVector,
) -> Result<f64> {
    if beta.values().iter().any(|&b| b == 1.0) {
        return Err(Error::contract("coefficient of exactly 1 has no delta relation"));
    }
    let star = fuse(theta_p, theta_prev, theta_t, beta)?;
    Ok(max_abs((0..theta_p.len()).map(|i| {
        let (p, prev, t, s, b) = (
            theta_p.data()[i],
            theta_prev.data()[i],
            theta_t.data()[i],
            star.data()[i],
            beta.values()[i],
        );
        let delta = s - prev + t - p;
        (s - t) - b / (b - 1.0) * delta
    })))
}

/// Exact quadratic `L(x) = L0 + g (x - c) + h/2 (x - c)^2` around `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticLoss {
    pub center: f64,
    pub value_at_center: f64,
    pub slope: f64,
    pub curvature: f64,
}

impl QuadraticLoss {
    pub fn eval(&self, x: f64) -> f64 {
        let u = x - self.center;
        self.value_at_center + self.slope * u + 0.5 * self.curvature * u * u
    }
}

/// Grid minimiser over `beta = k / resolution`, `k = 1..resolution-1`, of
/// `L(theta_star) - L(theta_t) + 1/2 (theta_star - theta_prev + theta_t - theta_p)^2`
/// with `theta_star` produced by the fusion rule. Ties keep the smallest
/// `beta`.
pub fn beta_oracle_grid_search(
    theta_p: f64,
    theta_prev: f64,
    theta_t: f64,
    loss: &QuadraticLoss,
    resolution: usize,
) -> f64 {
    let base = loss.eval(theta_t);
    let objective = |beta: f64| {
        let star = beta * theta_p + beta * theta_prev + (1.0 - 2.0 * beta) * theta_t;
        let shift = star - theta_prev + theta_t - theta_p;
        loss.eval(star) - base + 0.5 * shift * shift
    };
    let mut best = (f64::INFINITY, f64::NAN);
    for k in 1..resolution {
        let beta = k as f64 / resolution as f64;
        let value = objective(beta);
        if value < best.0 {
            best = (value, beta);
        }
    }
    best.1
}

/// Diagonal Gaussian given by per-coordinate means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                op: "diag_gaussian",
                left: vec![mean.len()],
                right: vec![var.len()],
            });
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::contract(format!("variance must be positive, got {v}")));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Product measure over the concatenated coordinates.
    pub fn product(&self, other: &Self) -> Self {
        Self {
            mean: self.mean.iter().chain(&other.mean).copied().collect(),
            var: self.var.iter().chain(&other.var).copied().collect(),
        }
    }
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_divergence(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: vec![q.dim()],
            right: vec![p.dim()],
        });
    }
    for g in [q, p] {
        if g.var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("variance must be positive"));
        }
    }
    Ok(0.5
        * q.mean
            .iter()
            .zip(&q.var)
            .zip(p.mean.iter().zip(&p.var))
            .map(|((mq, vq), (mp, vp))| {
                let diff = mq - mp;
                (vp / vq).ln() + (vq + diff * diff) / vp - 1.0
            })
            .sum::<f64>())
}

/// `|KL(q_s x q_g || p_init x q_prev) - KL(q_s || p_init) - KL(q_g || q_prev)|`.
pub fn kl_additivity_check(
    q_s: &DiagGaussian,
    p_init: &DiagGaussian,
    q_g: &DiagGaussian,
    q_prev: &DiagGaussian,
) -> Result<f64> {
    let joint = kl_divergence(&q_s.product(q_g), &p_init.product(q_prev))?;
    let split = kl_divergence(q_s, p_init)? + kl_divergence(q_g, q_prev)?;
    Ok((joint - split).abs())
}
