//! Post-training gradient and empirical Fisher statistics over task data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelIndex};
use crate::error::{Error, Result};
use crate::model::{Adapter, Backbone, Head, ParameterVector};
use crate::numerics::{Tape, Tensor};

/// Gradient and Fisher diagonal of the task loss at the trained adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionStatistics {
    pub grad: ParameterVector,
    pub fisher: ParameterVector,
    pub f_min: f64,
    pub f_mean: f64,
}

impl FusionStatistics {
    /// Validates the pair and derives the global summary scalars.
    pub fn new(grad: ParameterVector, fisher: ParameterVector) -> Result<Self> {
        grad.ensure_same_layout(&fisher)?;
        let (f_min, f_mean) = summarize(fisher.data())?;
        Ok(Self {
            grad,
            fisher,
            f_min,
            f_mean,
        })
    }

    /// Per-coordinate `(F_min, F_mean)` for the chosen scope.
    pub fn scope_bounds(&self, scope: FisherScope) -> Result<Vec<(f64, f64)>> {
        match scope {
            FisherScope::Global => Ok(vec![(self.f_min, self.f_mean); self.fisher.len()]),
            FisherScope::PerLayer => {
                let per_layer = summarize_per_layer(&self.fisher)?;
                let mut out = vec![(0.0, 0.0); self.fisher.len()];
                for s in &self.fisher.layout().segments {
                    for slot in &mut out[s.range()] {
                        *slot = per_layer[s.layer];
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Granularity of `F_min` / `F_mean`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherScope {
    /// One pair over the whole flattened adapter.
    #[default]
    Global,
    /// Experimental: one pair per adapted layer.
    PerLayer,
}

/// Exact minimum and arithmetic mean.
pub fn summarize(fisher: &[f64]) -> Result<(f64, f64)> {
    if fisher.is_empty() {
        return Err(Error::contract("cannot summarize an empty Fisher vector"));
    }
    if let Some(bad) = fisher.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!(
            "Fisher entries must be finite and non-negative, found {bad}"
        )));
    }
    let min = fisher.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = fisher.iter().sum::<f64>() / fisher.len() as f64;
    // Rounding in the mean can dip a hair below the minimum for constant input.
    Ok((min, mean.max(min)))
}

/// Summary scalars for each adapted layer, indexed by layer.
pub fn summarize_per_layer(fisher: &ParameterVector) -> Result<Vec<(f64, f64)>> {
    let layers = fisher
        .layout()
        .segments
        .iter()
        .map(|s| s.layer + 1)
        .max()
        .unwrap_or(0);
    (0..layers)
        .map(|layer| {
            let values: Vec<f64> = fisher
                .layout()
                .segments
                .iter()
                .filter(|s| s.layer == layer)
                .flat_map(|s| fisher.data()[s.range()].iter().copied())
                .collect();
            summarize(&values)
        })
        .collect()
}

/// Frozen pieces that define the task loss seen by the adapter.
#[derive(Debug, Clone, Copy)]
pub struct TaskObjective<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a Head,
    pub labels: &'a LabelIndex,
    /// Multiplier on the cross-entropy.
    pub loss_scale: f64,
}

impl<'a> TaskObjective<'a> {
    pub fn new(backbone: &'a Backbone, head: &'a Head, labels: &'a LabelIndex) -> Self {
        Self {
            backbone,
            head,
            labels,
            loss_scale: 1.0,
        }
    }

    /// Mean loss over `x` and its gradient with respect to the adapter.
    pub fn loss_and_gradient(
        &self,
        adapter: &Adapter,
        x: &Tensor,
        labels: &[crate::data::ClassId],
    ) -> Result<(f64, ParameterVector)> {
        let targets = self.labels.map(labels)?;
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let rec = self.backbone.record(&mut tape, xi, Some(adapter), true)?;
        let w = tape.constant(self.head.weight.clone());
        let b = tape.constant(self.head.bias.clone());
        let logits = Head::record(&mut tape, rec.features, w, b, self.head.cosine_scale)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        let loss = if self.loss_scale == 1.0 {
            ce
        } else {
            tape.scale(ce, self.loss_scale)?
        };
        let grads = tape.backward(loss)?;
        let layout = adapter.layout();
        let mut flat = Vec::with_capacity(layout.len());
        for (down, up) in &rec.adapter {
            flat.extend_from_slice(grads.wrt(*down).data());
            flat.extend_from_slice(grads.wrt(*up).data());
        }
        Ok((tape.value(loss).data()[0], ParameterVector::new(layout, flat)?))
    }

    /// Gradient of each sample's loss, in dataset order.
    pub fn per_sample_gradients(&self, adapter: &Adapter, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        if data.is_empty() {
            return Err(Error::config("statistics need a non-empty dataset"));
        }
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let (x, y) = data.gather(&[i])?;
                Ok(self.loss_and_gradient(adapter, &x, &y)?.1.into_data())
            })
            .collect()
    }
}

fn mean_of<F>(rows: &[Vec<f64>], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64,
{
    let n = rows.len() as f64;
    let mut acc = vec![0.0; rows[0].len()];
    for row in rows {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f(v);
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean per-sample gradient of the task loss.
pub fn compute_gradient(
    objective: &TaskObjective<'_>,
    adapter: &Adapter,
    data: &Dataset,
) -> Result<ParameterVector> {
    let rows = objective.per_sample_gradients(adapter, data)?;
    ParameterVector::new(adapter.layout(), mean_of(&rows, |v| v))
}

/// Empirical Fisher diagonal: mean of squared per-sample gradients.
pub fn compute_fisher_diagonal(
    objective: &TaskObjective<'_>,
    adapter: &Adapter,
    data: &Dataset,
) -> Result<ParameterVector> {
    let rows = objective.per_sample_gradients(adapter, data)?;
    ParameterVector::new(adapter.layout(), mean_of(&rows, |v| v * v))
}

/// Gradient, Fisher and summary scalars from a single per-sample sweep.
pub fn compute_statistics(
    objective: &TaskObjective<'_>,
    adapter: &Adapter,
    data: &Dataset,
) -> Result<FusionStatistics> {
    let rows = objective.per_sample_gradients(adapter, data)?;
    let layout = adapter.layout();
    FusionStatistics::new(
        ParameterVector::new(layout.clone(), mean_of(&rows, |v| v))?,
        ParameterVector::new(layout, mean_of(&rows, |v| v * v))?,
    )
}
