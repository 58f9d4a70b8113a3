//! Momentum SGD with a per-epoch cosine-annealed learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 48,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based) of `epochs`, annealed from `base` to 0.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Trains `groups` in place on cross-entropy.
///
/// `build` records the forward pass for one batch and returns the logits
/// node; it receives the parameter nodes in the same order as `groups`.
pub(crate) fn fit<F>(
    groups: &mut [Tensor],
    data: &Dataset,
    targets: &[usize],
    cfg: &SgdConfig,
    seed: u64,
    mut build: F,
) -> Result<()>
where
    F: FnMut(&mut Tape, &[NodeId], NodeId) -> Result<NodeId>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok(());
    }
    let mut velocity: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, _) = data.gather(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let params: Vec<NodeId> = groups.iter().map(|g| tape.param(g.clone())).collect();
            let logits = build(&mut tape, &params, xi)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?;
            for ((group, vel), id) in groups.iter_mut().zip(&mut velocity).zip(&params) {
                let Some(g) = grads.get(*id) else { continue };
                let mut updated = group.data().to_vec();
                for ((p, v), gv) in updated.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + gv;
                    *p -= lr * *v;
                }
                *group = Tensor::new(group.shape().to_vec(), updated)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 9, 10) > 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SgdConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SgdConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }
}
