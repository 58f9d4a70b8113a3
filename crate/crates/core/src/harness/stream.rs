//! Synthetic class-incremental task streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of a Gaussian-blob stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    /// Classes reserved for backbone pretraining.
    pub pretrain_classes: usize,
    /// Norm of every class mean.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Number of task-specific high-variance directions.
    pub nuisance_dims: usize,
    /// Number of high-variance directions shared by every task.
    pub shared_nuisance_dims: usize,
    /// Standard deviation along each nuisance direction.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 10,
            classes_per_task: 5,
            input_dim: 32,
            samples_per_class: 100,
            test_samples_per_class: 50,
            pretrain_classes: 20,
            separation: 10.0,
            noise: 1.0,
            nuisance_dims: 6,
            shared_nuisance_dims: 4,
            nuisance_scale: 6.0,
            seed: 1993,
        }
    }
}

impl StreamConfig {
    /// Isotropic blobs without nuisance directions.
    pub fn plain_blobs(self) -> Self {
        Self {
            nuisance_dims: 0,
            shared_nuisance_dims: 0,
            nuisance_scale: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return Err(Error::config(format!(
                "nuisance_scale must be >= 0, got {}",
                self.nuisance_scale
            )));
        }
        if self.nuisance_dims + self.shared_nuisance_dims > self.input_dim {
            return Err(Error::config("nuisance directions exceed input_dim"));
        }
        for (name, v) in [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("input_dim", self.input_dim),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
            ("pretrain_classes", self.pretrain_classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.pretrain_classes + self.num_tasks * self.classes_per_task
    }
}

/// One session of the stream. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<ClassId>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub pretrain: Dataset,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `k` orthonormal random directions (Gram-Schmidt).
fn orthonormal(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(d, rng);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Isotropic noise plus `scale`-sized noise along each `nuisance` direction.
struct Noise<'a> {
    iso: f64,
    nuisance: &'a [Vec<f64>],
    scale: f64,
}

fn sample_classes(
    classes: &[ClassId],
    means: &[Vec<f64>],
    per_class: usize,
    noise: &Noise<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let d = means[0].len();
    let mut values = Vec::with_capacity(classes.len() * per_class * d);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        for _ in 0..per_class {
            let mut x: Vec<f64> = means[c as usize]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + noise.iso * z
                })
                .collect();
            for dir in noise.nuisance {
                let z: f64 = StandardNormal.sample(rng);
                x.iter_mut().zip(dir).for_each(|(v, u)| *v += noise.scale * z * u);
            }
            values.extend(x);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), d, values)?, labels)
}

/// Draws class means on the sphere of radius `separation`, shuffles the class
/// order with `seed`, reserves the first `pretrain_classes` for pretraining
/// and splits the rest into tasks. Test splits are class-balanced.
///
/// Task samples carry extra noise along `shared_nuisance_dims` directions
/// common to all tasks plus `nuisance_dims` directions drawn per task.
/// Pretraining data has none.
pub fn build_synthetic_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_classes();
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let z = gaussian_vec(cfg.input_dim, &mut rng);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.into_iter().map(|v| cfg.separation * v / norm).collect()
        })
        .collect();
    let mut order: Vec<ClassId> = (0..total as ClassId).collect();
    order.shuffle(&mut rng);
    let (pre, rest) = order.split_at(cfg.pretrain_classes);

    let mut pre_sorted = pre.to_vec();
    pre_sorted.sort_unstable();
    let clean = Noise {
        iso: cfg.noise,
        nuisance: &[],
        scale: 0.0,
    };
    let pretrain = sample_classes(&pre_sorted, &means, cfg.samples_per_class, &clean, &mut rng)?;
    let shared = orthonormal(cfg.shared_nuisance_dims, cfg.input_dim, &mut rng);
    let tasks = rest
        .chunks(cfg.classes_per_task)
        .enumerate()
        .map(|(i, chunk)| {
            let mut classes = chunk.to_vec();
            classes.sort_unstable();
            let mut dirs = shared.clone();
            dirs.extend(orthonormal(cfg.nuisance_dims, cfg.input_dim, &mut rng));
            let noise = Noise {
                iso: cfg.noise,
                nuisance: &dirs,
                scale: cfg.nuisance_scale,
            };
            let train = sample_classes(&classes, &means, cfg.samples_per_class, &noise, &mut rng)?;
            let test = sample_classes(&classes, &means, cfg.test_samples_per_class, &noise, &mut rng)?;
            Ok(Task {
                index: i + 1,
                classes,
                train,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        config: cfg.clone(),
        pretrain,
        tasks,
    })
}
