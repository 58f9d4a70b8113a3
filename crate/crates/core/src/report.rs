//! Run documents on disk and the cross-run summary table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::{compute_metrics, AccuracyMatrix, Metrics, RunReport, StrategyConfig, StreamConfig};

pub const REPORT_SUFFIX: &str = ".report.json";
pub const CSV_SUFFIX: &str = ".accuracy.csv";
pub const CHECKPOINT_SUFFIX: &str = ".ckpt";

/// Largest tolerated gap between stored and recomputed metrics.
pub const METRIC_TOLERANCE: f64 = 1e-12;

/// Everything needed to interpret one run: its inputs and its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDocument {
    pub name: String,
    pub stream: StreamConfig,
    pub backbone: BackboneConfig,
    pub run: StrategyConfig,
    pub report: RunReport,
}

impl RunDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("run report: {e}")))
    }
}

/// A run document with the accuracy matrix from its CSV, when present.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub path: PathBuf,
    pub doc: RunDocument,
    pub csv: Option<AccuracyMatrix>,
}

/// Reads every `*.report.json` in `dir`, in file-name order.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read run directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(REPORT_SUFFIX)))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no run reports found in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path)?;
            let doc = RunDocument::from_json(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let csv_path = path.with_file_name(format!("{}{CSV_SUFFIX}", name.trim_end_matches(REPORT_SUFFIX)));
            let csv = match std::fs::read_to_string(&csv_path) {
                Ok(text) => Some(
                    AccuracyMatrix::from_csv(&text)
                        .map_err(|e| Error::Parse(format!("{}: {e}", csv_path.display())))?,
                ),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(e.into()),
            };
            Ok(LoadedRun { path, doc, csv })
        })
        .collect()
}

/// β statistics pooled over every fused task of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaSummary {
    pub tasks: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub fallbacks: usize,
}

fn beta_summary(report: &RunReport) -> Option<BetaSummary> {
    let betas: Vec<_> = report.tasks.iter().filter_map(|t| t.beta.as_ref()).collect();
    if betas.is_empty() {
        return None;
    }
    let count: usize = betas.iter().map(|b| b.count).sum();
    Some(BetaSummary {
        tasks: betas.len(),
        min: betas.iter().map(|b| b.min).fold(f64::INFINITY, f64::min),
        mean: betas.iter().map(|b| b.mean * b.count as f64).sum::<f64>() / count.max(1) as f64,
        max: betas.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max),
        clipped_low: betas.iter().map(|b| b.clipped_low).sum(),
        clipped_high: betas.iter().map(|b| b.clipped_high).sum(),
        fallbacks: betas.iter().map(|b| b.denominator_fallbacks).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub strategy: String,
    pub init: String,
    pub metrics: Metrics,
    pub beta: Option<BetaSummary>,
}

fn metric_gap(a: &Metrics, b: &Metrics) -> f64 {
    let s = match (a.stability, b.stability) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        (a.avg_acc - b.avg_acc).abs(),
        (a.final_acc - b.final_acc).abs(),
        (a.plasticity - b.plasticity).abs(),
        s,
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// One row per run. Stored metrics must match a recomputation from the
/// CSV matrix (or the report's own matrix) within [`METRIC_TOLERANCE`].
pub fn summarize(runs: &[LoadedRun]) -> Result<Vec<SummaryRow>> {
    runs.iter()
        .map(|r| {
            let matrix = match &r.csv {
                Some(m) => m.clone(),
                None => AccuracyMatrix::from_rows(r.doc.report.accuracy.clone())?,
            };
            let recomputed = compute_metrics(&matrix)?;
            let gap = metric_gap(&recomputed, &r.doc.report.metrics);
            if !(gap <= METRIC_TOLERANCE) {
                return Err(Error::Verification(format!(
                    "{}: stored metrics differ from the accuracy matrix by {gap:e}",
                    r.path.display()
                )));
            }
            Ok(SummaryRow {
                name: r.doc.name.clone(),
                strategy: r.doc.report.strategy.as_str().to_string(),
                init: r.doc.report.init.as_str().to_string(),
                metrics: recomputed,
                beta: beta_summary(&r.doc.report),
            })
        })
        .collect()
}

const HEADERS: [&str; 11] = [
    "run", "strategy", "init", "avg_acc", "final_acc", "stability", "plasticity", "beta_min", "beta_mean",
    "beta_max", "clipped",
];

fn cells(row: &SummaryRow) -> [String; 11] {
    let f = |v: f64| format!("{v:.4}");
    let opt = |v: Option<f64>| v.map(f).unwrap_or_else(|| "-".into());
    let b = row.beta;
    [
        row.name.clone(),
        row.strategy.clone(),
        row.init.clone(),
        f(row.metrics.avg_acc),
        f(row.metrics.final_acc),
        opt(row.metrics.stability),
        f(row.metrics.plasticity),
        opt(b.map(|b| b.min)),
        opt(b.map(|b| b.mean)),
        opt(b.map(|b| b.max)),
        b.map(|b| (b.clipped_low + b.clipped_high).to_string()).unwrap_or_else(|| "-".into()),
    ]
}

/// Aligned text table; text columns left-aligned, numbers right-aligned.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let body: Vec<[String; 11]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..HEADERS.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([HEADERS[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cols: &[String]| {
        let mut s = String::new();
        for (i, c) in cols.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 3 {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(s, "{c:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&HEADERS.map(String::from));
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

/// Comparison table as CSV with full-precision values.
pub fn comparison_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "run,strategy,init,avg_acc,final_acc,stability,plasticity,beta_min,beta_mean,beta_max,clipped_low,clipped_high\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let b = r.beta;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.strategy,
            r.init,
            r.metrics.avg_acc,
            r.metrics.final_acc,
            opt(r.metrics.stability),
            r.metrics.plasticity,
            opt(b.map(|b| b.min)),
            opt(b.map(|b| b.mean)),
            opt(b.map(|b| b.max)),
            b.map(|b| b.clipped_low.to_string()).unwrap_or_default(),
            b.map(|b| b.clipped_high.to_string()).unwrap_or_default(),
        );
    }
    out
}
