//! Cosine prototype classifier with Gaussian pseudo-feature alignment.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 256;

/// Unit-norm class direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class: ClassId,
    weight: Vec<f64>,
}

impl ClassPrototype {
    /// Normalises `direction`; fails if it is zero.
    pub fn from_direction(class: ClassId, direction: Vec<f64>) -> Result<Self> {
        let norm = l2(&direction);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateClass {
                class,
                reason: "mean feature has zero norm".into(),
            });
        }
        Ok(Self {
            class,
            weight: direction.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
}

/// Per-class diagonal Gaussian over features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub class: ClassId,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn column_mean(features: &Tensor) -> Vec<f64> {
    let (n, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// L2-normalised centroid of the feature rows.
pub fn compute_prototype(class: ClassId, features: &Tensor) -> Result<ClassPrototype> {
    ClassPrototype::from_direction(class, column_mean(features))
}

/// Sample mean and unbiased per-dimension variance, floored at `floor`.
/// A single row gives `floor` everywhere.
pub fn fit_gaussian(class: ClassId, features: &Tensor, floor: f64) -> Result<ClassGaussian> {
    if !(floor > 0.0) {
        return Err(Error::contract(format!("variance floor must be positive, got {floor}")));
    }
    let n = features.rows();
    let mu = column_mean(features);
    let var = if n < 2 {
        vec![floor; mu.len()]
    } else {
        let mut acc = vec![0.0; mu.len()];
        for i in 0..n {
            for ((a, v), m) in acc.iter_mut().zip(features.row(i)).zip(&mu) {
                *a += (v - m) * (v - m);
            }
        }
        acc.into_iter().map(|a| (a / (n - 1) as f64).max(floor)).collect()
    };
    Ok(ClassGaussian { class, mu, var })
}

/// Rebuilds each stored class's prototype from `samples_per_class` draws of
/// its Gaussian. Each class draws from its own stream of `seed`, so the
/// result does not depend on iteration order.
pub fn align_old_prototypes(
    gaussians: &BTreeMap<ClassId, ClassGaussian>,
    samples_per_class: usize,
    seed: u64,
) -> Result<BTreeMap<ClassId, ClassPrototype>> {
    if samples_per_class == 0 {
        return Err(Error::contract("samples_per_class must be at least 1"));
    }
    gaussians
        .iter()
        .map(|(&class, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::from(class));
            let d = g.mu.len();
            let mut sum = vec![0.0; d];
            for _ in 0..samples_per_class {
                for ((s, m), v) in sum.iter_mut().zip(&g.mu).zip(&g.var) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *s += m + v.sqrt() * z;
                }
            }
            let mean: Vec<f64> = sum.into_iter().map(|s| s / samples_per_class as f64).collect();
            Ok((class, ClassPrototype::from_direction(class, mean)?))
        })
        .collect()
}

/// Highest cosine similarity wins; ties go to the smallest class id.
pub fn classify(feature: &[f64], prototypes: &BTreeMap<ClassId, ClassPrototype>) -> Result<ClassId> {
    if prototypes.is_empty() {
        return Err(Error::Classification("no prototypes".into()));
    }
    let norm = l2(feature);
    if !(norm > 0.0) {
        return Err(Error::Classification("zero feature vector".into()));
    }
    let mut best: Option<(f64, ClassId)> = None;
    for (&class, proto) in prototypes {
        if proto.weight.len() != feature.len() {
            return Err(Error::Shape {
                op: "classify",
                left: vec![feature.len()],
                right: vec![proto.weight.len()],
            });
        }
        let score = feature.iter().zip(&proto.weight).map(|(a, b)| a * b).sum::<f64>() / norm;
        // BTreeMap iterates in ascending id order, so strict `>` keeps the smallest id on ties.
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, class));
        }
    }
    Ok(best.expect("non-empty").1)
}
