//! End-to-end experiment execution and offline fusion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{self, BetaReport, FusionConfig};
use crate::harness::{build_synthetic_stream, run_many, Metrics, RunOutcome, Strategy, TaskStream};
use crate::model::{pretrain_backbone, Backbone, ParameterVector};
use crate::report::{RunDocument, CHECKPOINT_SUFFIX, CSV_SUFFIX, REPORT_SUFFIX};

/// Files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub name: String,
    pub csv: PathBuf,
    pub report: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Directory with the last fusion step's inputs, when recorded.
    pub fusion_inputs: Option<PathBuf>,
    pub metrics: Metrics,
}

/// Builds the stream and pretrains the frozen backbone.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(TaskStream, Backbone)> {
    cfg.validate()?;
    let stream = build_synthetic_stream(&cfg.effective_stream())?;
    let backbone = pretrain_backbone(cfg.backbone.spec(), &stream.pretrain, &cfg.backbone.pretrain, cfg.seed)?;
    Ok((stream, backbone))
}

/// Runs every configured strategy and writes its CSV, JSON report and
/// checkpoint into `out_dir`. Nothing is written unless all runs succeed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunArtifacts>> {
    let (stream, backbone) = prepare(cfg)?;
    let runs = cfg.effective_runs();
    let outcomes = run_many(&stream, &backbone, &runs)
        .into_iter()
        .zip(&runs)
        .map(|(r, run)| {
            r.map_err(|e| match e {
                Error::Numeric { task, detail } => Error::Numeric {
                    task,
                    detail: format!("run {}: {detail}", run.label()),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<RunOutcome>>>()?;
    std::fs::create_dir_all(out_dir)?;
    outcomes
        .iter()
        .zip(&runs)
        .map(|(out, run)| {
            let name = run.label();
            let doc = RunDocument {
                name: name.clone(),
                stream: stream.config.clone(),
                backbone: cfg.backbone.clone(),
                run: run.clone(),
                report: out.report.clone(),
            };
            let csv = out_dir.join(format!("{name}{CSV_SUFFIX}"));
            let report = out_dir.join(format!("{name}{REPORT_SUFFIX}"));
            checkpoint::write_atomic(&csv, out.matrix.to_csv().as_bytes())?;
            checkpoint::write_atomic(&report, doc.to_json()?.as_bytes())?;
            let tasks = stream.num_tasks();
            let ckpt = if cfg.output.checkpoints {
                let path = out_dir.join(format!("{name}{CHECKPOINT_SUFFIX}"));
                checkpoint::save(&path, &Checkpoint::from_run_state(&out.state, tasks, run.strategy))?;
                Some(path)
            } else {
                None
            };
            let fusion_inputs = match (&out.state.last_fusion, cfg.output.record_fusion_inputs) {
                (Some(f), true) => {
                    let dir = out_dir.join(format!("{name}.fusion"));
                    let s = Some(run.strategy);
                    checkpoint::save(&dir.join("theta_p.ckpt"), &Checkpoint::from_adapter(&f.theta_p, tasks, s))?;
                    checkpoint::save(&dir.join("theta_prev.ckpt"), &Checkpoint::from_adapter(&f.theta_prev, tasks - 1, s))?;
                    checkpoint::save(&dir.join("theta_t.ckpt"), &Checkpoint::from_adapter(&f.theta_t, tasks, s))?;
                    checkpoint::save(&dir.join("stats.ckpt"), &Checkpoint::from_statistics(&f.stats, tasks, s))?;
                    Some(dir)
                }
                _ => None,
            };
            Ok(RunArtifacts {
                name,
                csv,
                report,
                checkpoint: ckpt,
                fusion_inputs,
                metrics: out.report.metrics.clone(),
            })
        })
        .collect()
}

/// Result of [`fuse_checkpoints`].
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineFusion {
    pub fused: ParameterVector,
    pub task_index: usize,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub beta: BetaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaDocument {
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub task_index: usize,
    pub beta: BetaReport,
}

/// Replays one fusion step from checkpoints. `gamma` selects the weighted
/// rule; without it the plain rule is used.
pub fn fuse_checkpoints(
    theta_p: &Checkpoint,
    theta_prev: &Checkpoint,
    theta_t: &Checkpoint,
    stats: &Checkpoint,
    alpha: Option<f64>,
    gamma: Option<f64>,
) -> Result<OfflineFusion> {
    let mut cfg = FusionConfig::default();
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    if let Some(g) = gamma {
        cfg.gamma = g;
    }
    cfg.validate()?;
    let (p, prev, t) = (theta_p.primary_adapter()?, theta_prev.primary_adapter()?, theta_t.primary_adapter()?);
    let stats = stats.statistics()?;
    let outcome = fusion::compute_beta(&p, &prev, &t, &stats, &cfg)?;
    let fused = match gamma {
        Some(g) => fusion::fuse_gamma(&p, &prev, &t, &outcome.beta, g)?,
        None => fusion::fuse(&p, &prev, &t, &outcome.beta)?,
    };
    Ok(OfflineFusion {
        fused,
        task_index: theta_t.task_index,
        alpha: cfg.alpha,
        gamma,
        beta: outcome.report,
    })
}

/// Path of the β statistics written next to a fused checkpoint.
pub fn beta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("beta.json")
}

/// Writes the fused adapter checkpoint and its β statistics JSON.
pub fn write_fused(path: &Path, f: &OfflineFusion) -> Result<PathBuf> {
    let strategy = Some(if f.gamma.is_some() { Strategy::DafGamma } else { Strategy::Daf });
    checkpoint::save(path, &Checkpoint::from_adapter(&f.fused, f.task_index, strategy))?;
    let doc = BetaDocument {
        alpha: f.alpha,
        gamma: f.gamma,
        task_index: f.task_index,
        beta: f.beta.clone(),
    };
    let mut json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    json.push('\n');
    let beta = beta_path(path);
    checkpoint::write_atomic(&beta, json.as_bytes())?;
    Ok(beta)
}
