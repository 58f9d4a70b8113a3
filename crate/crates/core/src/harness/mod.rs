//! Class-incremental protocol: per-task training, fusion strategies and
//! evaluation with the aligned prototype classifier.

mod metrics;
mod stream;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{compute_metrics, AccuracyMatrix, Metrics};
pub use stream::{build_synthetic_stream, StreamConfig, Task, TaskStream};

use crate::classifier::{self, ClassGaussian, ClassPrototype};
use crate::data::{ClassId, Dataset, LabelIndex};
use crate::error::{Error, Result};
use crate::fusion::{self, BetaReport, BetaVector, FusionConfig};
use crate::model::{Adapter, AdapterLayer, Backbone, Head, ParameterVector};
use crate::numerics::Tensor;
use crate::optim::{self, SgdConfig};
use crate::stats::{compute_statistics, FusionStatistics, TaskObjective};

/// How the global adapter is formed from each task adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Daf,
    StaticFusion,
    Ema,
    Finetune,
    LastTask,
    DafGamma,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Daf,
        Strategy::StaticFusion,
        Strategy::Ema,
        Strategy::Finetune,
        Strategy::LastTask,
        Strategy::DafGamma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Daf => "daf",
            Strategy::StaticFusion => "static_fusion",
            Strategy::Ema => "ema",
            Strategy::Finetune => "finetune",
            Strategy::LastTask => "last_task",
            Strategy::DafGamma => "daf_gamma",
        }
    }
}

/// Where each task adapter starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fresh random adapter per task.
    Random,
    /// The previous task adapter.
    PreviousTask,
    /// Running mean of all previous task adapters.
    Robust,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::PreviousTask => "previous_task",
            InitMode::Robust => "robust",
        }
    }
}

pub const DEFAULT_COSINE_SCALE: f64 = 16.0;

/// Temporary head trained next to each task adapter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `s * cos(f, w_c) + b_c`.
    #[default]
    Cosine,
    /// `f W + b`.
    Linear,
}

/// Everything that defines one strategy run on a given stream and backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    /// Output file stem; derived from the strategy when absent.
    pub name: Option<String>,
    pub strategy: Strategy,
    pub init: InitMode,
    pub beta_static: f64,
    pub ema_decay: f64,
    pub adapter_rank: usize,
    pub head: HeadKind,
    /// Logit scale of the cosine training head.
    pub cosine_scale: f64,
    pub align_samples: usize,
    pub variance_floor: f64,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub sgd: SgdConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: None,
            strategy: Strategy::Daf,
            init: InitMode::Robust,
            beta_static: 1.0 / 3.0,
            ema_decay: 0.9,
            adapter_rank: 8,
            head: HeadKind::Cosine,
            cosine_scale: DEFAULT_COSINE_SCALE,
            align_samples: classifier::DEFAULT_SAMPLES_PER_CLASS,
            variance_floor: classifier::DEFAULT_VARIANCE_FLOOR,
            seed: 0,
            fusion: FusionConfig::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.sgd.validate()?;
        if !(self.beta_static > 0.0 && self.beta_static <= 0.5) {
            return Err(Error::config(format!(
                "beta_static must lie in (0, 0.5], got {}",
                self.beta_static
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            )));
        }
        if self.adapter_rank == 0 {
            return Err(Error::config("adapter_rank must be positive"));
        }
        if self.head == HeadKind::Cosine && !(self.cosine_scale > 0.0 && self.cosine_scale.is_finite()) {
            return Err(Error::config(format!(
                "cosine_scale must be positive, got {}",
                self.cosine_scale
            )));
        }
        if self.align_samples == 0 {
            return Err(Error::config("align_samples must be positive"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::config("variance_floor must be positive"));
        }
        Ok(())
    }

    /// Logit scale for [`train_task_adapter`]; `None` selects a linear head.
    pub fn head_scale(&self) -> Option<f64> {
        match self.head {
            HeadKind::Cosine => Some(self.cosine_scale),
            HeadKind::Linear => None,
        }
    }

    /// `name`, or a `strategy-init` tag (with `-g<gamma>` for `daf_gamma`).
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.strategy {
            Strategy::DafGamma => format!("{}-{}-g{}", self.strategy.as_str(), self.init.as_str(), self.fusion.gamma),
            s => format!("{}-{}", s.as_str(), self.init.as_str()),
        }
    }
}

/// Mixes a run seed with a task index and a purpose tag.
fn sub_seed(seed: u64, task: usize, purpose: u64) -> u64 {
    let mut z = seed
        ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_ALIGN: u64 = 3;

/// A trained task adapter together with the head it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTask {
    pub adapter: ParameterVector,
    pub head: Head,
    pub labels: LabelIndex,
}

impl TrainedTask {
    /// Head accuracy on `data` with the trained adapter.
    pub fn accuracy(&self, backbone: &Backbone, data: &Dataset) -> Result<f64> {
        let adapter = Adapter::unflatten(&self.adapter)?;
        let feats = backbone.features(&data.inputs()?, &adapter)?;
        let logits = self.head.logits(&feats)?;
        let targets = self.labels.map(data.labels())?;
        let hits = (0..logits.rows())
            .filter(|&i| {
                let row = logits.row(i);
                let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                arg == targets[i]
            })
            .count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Trains an adapter started at `init` jointly with a fresh head on the
/// task's classes. The backbone stays frozen.
pub fn train_task_adapter(
    backbone: &Backbone,
    init: &ParameterVector,
    data: &Dataset,
    sgd: &SgdConfig,
    cosine_scale: Option<f64>,
    seed: u64,
) -> Result<TrainedTask> {
    if data.is_empty() {
        return Err(Error::config("task has no training samples"));
    }
    let adapter = Adapter::unflatten(init)?;
    let labels = LabelIndex::new(data.classes());
    let targets = labels.map(data.labels())?;
    let head = match cosine_scale {
        Some(scale) => Head::cosine(backbone.dim(), labels.len(), scale, seed),
        None => Head::init(backbone.dim(), labels.len(), seed),
    };

    let n_layers = adapter.num_layers();
    let mut groups: Vec<Tensor> = adapter
        .layers()
        .iter()
        .flat_map(|l| [l.down.clone(), l.up.clone()])
        .collect();
    groups.push(head.weight);
    groups.push(head.bias);
    optim::fit(&mut groups, data, &targets, sgd, seed.wrapping_add(1), |tape, p, x| {
        let pairs: Vec<_> = (0..n_layers).map(|l| (p[2 * l], p[2 * l + 1])).collect();
        let features = backbone.record_with_adapter(tape, x, &pairs)?;
        Head::record(tape, features, p[2 * n_layers], p[2 * n_layers + 1], cosine_scale)
    })?;

    let bias = groups.pop().expect("head bias");
    let weight = groups.pop().expect("head weight");
    let mut it = groups.into_iter();
    let layers = (0..n_layers)
        .map(|_| AdapterLayer {
            down: it.next().expect("down"),
            up: it.next().expect("up"),
        })
        .collect();
    let trained = Adapter::new(layers)?.flatten();
    trained.ensure_same_layout(init)?;
    Ok(TrainedTask {
        adapter: trained,
        head: Head {
            weight,
            bias,
            cosine_scale,
        },
        labels,
    })
}

/// Inputs of the last fusion step, kept so it can be replayed offline.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub theta_p: ParameterVector,
    pub theta_prev: ParameterVector,
    pub theta_t: ParameterVector,
    pub stats: FusionStatistics,
    /// `Some` for the gamma variant.
    pub gamma: Option<f64>,
}

/// Retained-state audit for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAudit {
    pub retained: Vec<String>,
    pub expected: Vec<String>,
    pub passed: bool,
}

/// Per-task entry of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub train_accuracy: f64,
    pub beta: Option<BetaReport>,
    pub audit: StateAudit,
}

/// Machine-readable summary of one run. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub init: InitMode,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub num_tasks: usize,
    pub metrics: Metrics,
    pub accuracy: Vec<Vec<f64>>,
    pub tasks: Vec<TaskRecord>,
    pub backbone_before: String,
    pub backbone_after: String,
}

impl RunReport {
    pub fn backbone_unchanged(&self) -> bool {
        self.backbone_before == self.backbone_after
    }

    pub fn audits_passed(&self) -> bool {
        self.tasks.iter().all(|t| t.audit.passed)
    }

    /// Every reported coefficient lies in `[lo, hi]`.
    pub fn betas_within(&self, lo: f64, hi: f64) -> bool {
        self.tasks
            .iter()
            .filter_map(|t| t.beta.as_ref())
            .all(|b| b.min >= lo && b.max <= hi)
    }
}

/// State left after the final task.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalState {
    pub theta_star: ParameterVector,
    pub theta_avg: Option<ParameterVector>,
    pub prototypes: BTreeMap<ClassId, ClassPrototype>,
    pub gaussians: BTreeMap<ClassId, ClassGaussian>,
    pub last_fusion: Option<FusionInputs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub report: RunReport,
    pub state: FinalState,
}

/// State carried from one task to the next. Nothing else survives a task.
struct Carried {
    theta_star: ParameterVector,
    theta_avg: Option<ParameterVector>,
    previous_task: Option<ParameterVector>,
    gaussians: BTreeMap<ClassId, ClassGaussian>,
    prototypes: BTreeMap<ClassId, ClassPrototype>,
    tasks_absorbed: usize,
}

impl Carried {
    fn adapter_slots(&self) -> Vec<String> {
        let mut out = vec!["theta_star".to_string()];
        if self.theta_avg.is_some() {
            out.push("theta_avg".into());
        }
        if self.previous_task.is_some() {
            out.push("previous_task".into());
        }
        out
    }

    fn expected_slots(init: InitMode) -> Vec<String> {
        let mut out = vec!["theta_star".to_string()];
        match init {
            InitMode::Robust => out.push("theta_avg".into()),
            InitMode::PreviousTask => out.push("previous_task".into()),
            InitMode::Random => {}
        }
        out
    }

    fn audit(&self, init: InitMode, layout_of: &ParameterVector) -> StateAudit {
        let retained = self.adapter_slots();
        let expected = Self::expected_slots(init);
        let layouts_ok = [Some(&self.theta_star), self.theta_avg.as_ref(), self.previous_task.as_ref()]
            .into_iter()
            .flatten()
            .all(|v| v.ensure_same_layout(layout_of).is_ok());
        let classes_ok = self.gaussians.len() == self.prototypes.len()
            && self.gaussians.keys().eq(self.prototypes.keys());
        StateAudit {
            passed: retained == expected && layouts_ok && classes_ok,
            retained,
            expected,
        }
    }
}

fn numeric(task: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Evaluation(detail) => Error::Numeric { task, detail },
        other => other,
    }
}

fn ensure_finite(v: &ParameterVector, task: usize, what: &str) -> Result<()> {
    match v.data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric {
            task,
            detail: format!("{what} has a non-finite entry at index {i}"),
        }),
        None => Ok(()),
    }
}

fn weighted_sum(a: &ParameterVector, wa: f64, b: &ParameterVector, wb: f64) -> Result<ParameterVector> {
    a.ensure_same_layout(b)?;
    a.with_data(a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect())
}

/// Fraction of `data` that the prototype classifier labels correctly.
pub fn prototype_accuracy(
    backbone: &Backbone,
    adapter: &Adapter,
    prototypes: &BTreeMap<ClassId, ClassPrototype>,
    data: &Dataset,
) -> Result<f64> {
    let feats = backbone.features(&data.inputs()?, adapter)?;
    let mut hits = 0;
    for (i, &label) in data.labels().iter().enumerate() {
        if classifier::classify(feats.row(i), prototypes)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Runs one strategy over the whole stream.
pub fn run_strategy(stream: &TaskStream, backbone: &Backbone, cfg: &StrategyConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::contract("backbone must be frozen before a run"));
    }
    if stream.tasks.is_empty() {
        return Err(Error::config("stream has no tasks"));
    }
    let backbone_before = backbone.fingerprint();
    let layers = backbone.num_blocks();
    let dim = backbone.dim();
    let theta_init = Adapter::init_random(layers, dim, cfg.adapter_rank, sub_seed(cfg.seed, 1, SEED_INIT))?.flatten();

    let mut carried = Carried {
        theta_star: theta_init.clone(),
        theta_avg: None,
        previous_task: None,
        gaussians: BTreeMap::new(),
        prototypes: BTreeMap::new(),
        tasks_absorbed: 0,
    };
    let mut matrix = AccuracyMatrix::new(stream.num_tasks());
    let mut records = Vec::with_capacity(stream.num_tasks());
    let mut last_fusion = None;

    for task in &stream.tasks {
        let t = task.index;
        let init = match (cfg.init, t) {
            (_, 1) => theta_init.clone(),
            (InitMode::Random, _) => {
                Adapter::init_random(layers, dim, cfg.adapter_rank, sub_seed(cfg.seed, t, SEED_INIT))?.flatten()
            }
            (InitMode::PreviousTask, _) => carried.previous_task.clone().expect("previous task adapter"),
            (InitMode::Robust, _) => carried.theta_avg.clone().expect("running average"),
        };

        let trained = train_task_adapter(
            backbone,
            &init,
            &task.train,
            &cfg.sgd,
            cfg.head_scale(),
            sub_seed(cfg.seed, t, SEED_TRAIN),
        )
            .map_err(numeric(t))?;
        ensure_finite(&trained.adapter, t, "task adapter")?;
        let train_accuracy = trained.accuracy(backbone, &task.train).map_err(numeric(t))?;
        let theta_t = trained.adapter.clone();
        let theta_p = &init;
        let theta_prev = &carried.theta_star;

        let mut beta_report = None;
        let theta_star = match cfg.strategy {
            Strategy::Daf | Strategy::DafGamma => {
                let objective = TaskObjective::new(backbone, &trained.head, &trained.labels);
                let adapter_t = Adapter::unflatten(&theta_t)?;
                let stats = compute_statistics(&objective, &adapter_t, &task.train).map_err(numeric(t))?;
                let outcome = fusion::compute_beta(theta_p, theta_prev, &theta_t, &stats, &cfg.fusion)?;
                let gamma = (cfg.strategy == Strategy::DafGamma).then_some(cfg.fusion.gamma);
                let fused = match gamma {
                    Some(g) => fusion::fuse_gamma(theta_p, theta_prev, &theta_t, &outcome.beta, g)?,
                    None => fusion::fuse(theta_p, theta_prev, &theta_t, &outcome.beta)?,
                };
                beta_report = Some(outcome.report);
                last_fusion = Some(FusionInputs {
                    theta_p: theta_p.clone(),
                    theta_prev: theta_prev.clone(),
                    theta_t: theta_t.clone(),
                    stats,
                    gamma,
                });
                fused
            }
            Strategy::StaticFusion => {
                let beta = BetaVector::constant(&theta_t, cfg.beta_static);
                fusion::fuse(theta_p, theta_prev, &theta_t, &beta)?
            }
            Strategy::Ema => weighted_sum(theta_prev, cfg.ema_decay, &theta_t, 1.0 - cfg.ema_decay)?,
            Strategy::Finetune | Strategy::LastTask => theta_t.clone(),
        };
        ensure_finite(&theta_star, t, "global adapter")?;

        // Classifier stores: Gaussians and new prototypes come from the task
        // adapter's features; old prototypes are rebuilt from the Gaussians.
        let adapter_t = Adapter::unflatten(&theta_t)?;
        let feats = backbone.features(&task.train.inputs()?, &adapter_t).map_err(numeric(t))?;
        let mut new_protos = BTreeMap::new();
        for &c in &task.classes {
            let rows: Vec<usize> = task.train.rows_of(c);
            let data: Vec<f64> = rows.iter().flat_map(|&i| feats.row(i).iter().copied()).collect();
            let class_feats = Tensor::matrix(rows.len(), dim, data)?;
            carried
                .gaussians
                .insert(c, classifier::fit_gaussian(c, &class_feats, cfg.variance_floor)?);
            new_protos.insert(c, classifier::compute_prototype(c, &class_feats)?);
        }
        let old: BTreeMap<ClassId, ClassGaussian> = carried
            .gaussians
            .iter()
            .filter(|(c, _)| !new_protos.contains_key(c))
            .map(|(c, g)| (*c, g.clone()))
            .collect();
        let mut prototypes =
            classifier::align_old_prototypes(&old, cfg.align_samples, sub_seed(cfg.seed, t, SEED_ALIGN))?;
        prototypes.extend(new_protos);
        carried.prototypes = prototypes;

        // Carry forward only what the next task needs; theta_t is dropped here.
        match cfg.init {
            InitMode::Robust => {
                let avg = fusion::update_running_average(
                    carried.theta_avg.as_ref().unwrap_or(&theta_init),
                    &theta_t,
                    carried.tasks_absorbed + 1,
                )?;
                carried.theta_avg = Some(avg);
            }
            InitMode::PreviousTask => carried.previous_task = Some(theta_t.clone()),
            InitMode::Random => {}
        }
        carried.theta_star = theta_star;
        carried.tasks_absorbed += 1;
        let audit = carried.audit(cfg.init, &theta_init);

        let eval_adapter = if cfg.strategy == Strategy::LastTask {
            adapter_t
        } else {
            Adapter::unflatten(&carried.theta_star)?
        };
        let row = stream.tasks[..t]
            .par_iter()
            .map(|seen| prototype_accuracy(backbone, &eval_adapter, &carried.prototypes, &seen.test))
            .collect::<Result<Vec<f64>>>()
            .map_err(numeric(t))?;
        matrix.push_row(row)?;
        records.push(TaskRecord {
            task: t,
            train_accuracy,
            beta: beta_report,
            audit,
        });
    }

    let metrics = compute_metrics(&matrix)?;
    let report = RunReport {
        strategy: cfg.strategy,
        init: cfg.init,
        seed: cfg.seed,
        gamma: (cfg.strategy == Strategy::DafGamma).then_some(cfg.fusion.gamma),
        num_tasks: stream.num_tasks(),
        metrics,
        accuracy: matrix.rows().to_vec(),
        tasks: records,
        backbone_before,
        backbone_after: backbone.fingerprint(),
    };
    Ok(RunOutcome {
        matrix,
        report,
        state: FinalState {
            theta_star: carried.theta_star,
            theta_avg: carried.theta_avg,
            prototypes: carried.prototypes,
            gaussians: carried.gaussians,
            last_fusion,
        },
    })
}

/// Independent runs on one stream, in parallel; results keep input order.
pub fn run_many(stream: &TaskStream, backbone: &Backbone, cfgs: &[StrategyConfig]) -> Vec<Result<RunOutcome>> {
    cfgs.par_iter().map(|c| run_strategy(stream, backbone, c)).collect()
}
