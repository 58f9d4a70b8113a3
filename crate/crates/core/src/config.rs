//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{StrategyConfig, StreamConfig};
use crate::model::BackboneSpec;
use crate::optim::SgdConfig;

/// Backbone shape and its pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_blocks: usize,
    pub pretrain: SgdConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let spec = BackboneSpec::default();
        Self {
            input_dim: spec.input_dim,
            feature_dim: spec.feature_dim,
            num_blocks: spec.num_blocks,
            pretrain: SgdConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec {
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
            num_blocks: self.num_blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output directory, relative to the config file.
    pub dir: Option<PathBuf>,
    /// Write the final state of every run as a checkpoint.
    pub checkpoints: bool,
    /// Also write the inputs of the last fusion step of every fusing run.
    pub record_fusion_inputs: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoints: true,
            record_fusion_inputs: false,
        }
    }
}

/// Runs the verification suite before any training.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyToggle {
    pub enabled: bool,
    pub seed: u64,
}

/// A complete experiment: one stream, one backbone, several strategy runs.
///
/// `seed` offsets every other seed: the stream uses `stream.seed + seed`,
/// the backbone uses `seed` and each run uses `run.seed + seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verify: VerifyToggle,
    pub runs: Vec<StrategyConfig>,
}

/// 1-based line of byte offset `pos` in `text`.
fn line_at(text: &str, pos: usize) -> usize {
    text.as_bytes()[..pos.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

/// First line in `lines[from..to]` that assigns `key`.
fn line_of_key(lines: &[&str], key: &str, from: usize, to: usize) -> Option<usize> {
    (from..to.min(lines.len()))
        .find(|&i| lines[i].contains('=') && lines[i].split('=').next().is_some_and(|k| k.trim() == key))
        .map(|i| i + 1)
}

/// Leading identifier of a validation message, e.g. `noise` in "noise must be >= 0".
fn leading_key(msg: &str) -> &str {
    let end = msg.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(msg.len());
    &msg[..end]
}

/// Line range of the first table whose header satisfies `is_header`.
fn section(lines: &[&str], is_header: impl Fn(&str) -> bool) -> Option<(usize, usize)> {
    let start = lines.iter().position(|l| is_header(l.trim()))?;
    let end = (start + 1..lines.len())
        .find(|&i| lines[i].trim_start().starts_with('['))
        .unwrap_or(lines.len());
    Some((start, end))
}

fn anchored(line: Option<usize>, msg: impl std::fmt::Display) -> Error {
    match line {
        Some(l) => Error::Config(format!("line {l}: {msg}")),
        None => Error::Config(msg.to_string()),
    }
}

fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line when known.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_at(text, s.start));
            anchored(line, e.message())
        })?;
        cfg.validate_with_source(Some(text))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_source(None)
    }

    fn validate_with_source(&self, text: Option<&str>) -> Result<()> {
        let lines: Vec<&str> = text.map(|t| t.lines().collect()).unwrap_or_default();
        let in_table = |header: &str, key: &str| {
            section(&lines, |l| l == header).and_then(|(a, b)| line_of_key(&lines, key, a, b))
        };
        let wrap = |header: &'static str| {
            move |e: Error| match e {
                Error::Config(m) => anchored(in_table(header, leading_key(&m)), m),
                other => other,
            }
        };
        self.stream.validate().map_err(wrap("[stream]"))?;
        if self.stream.input_dim != self.backbone.input_dim {
            let line = in_table("[stream]", "input_dim").or_else(|| in_table("[backbone]", "input_dim"));
            return Err(anchored(
                line,
                format!(
                    "stream.input_dim ({}) differs from backbone.input_dim ({})",
                    self.stream.input_dim, self.backbone.input_dim
                ),
            ));
        }
        if self.backbone.feature_dim == 0 || self.backbone.num_blocks == 0 {
            return Err(anchored(
                in_table("[backbone]", "feature_dim").or_else(|| in_table("[backbone]", "num_blocks")),
                "backbone dimensions must be positive",
            ));
        }
        self.backbone.pretrain.validate().map_err(wrap("[backbone.pretrain]"))?;
        if self.runs.is_empty() {
            return Err(Error::config("at least one [[runs]] entry is required"));
        }
        let headers: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].trim() == "[[runs]]").collect();
        let mut names = BTreeSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            let label = run.label();
            let header = headers.get(i).copied();
            let at = |key: &str, msg: String| {
                let line = header.map(|h| {
                    let end = headers.get(i + 1).copied().unwrap_or(lines.len());
                    line_of_key(&lines, key, h, end).unwrap_or(h + 1)
                });
                anchored(line, format!("run {}: {msg}", i + 1))
            };
            run.validate().map_err(|e| match e {
                Error::Config(m) => at(leading_key(&m), m.clone()),
                other => other,
            })?;
            if run.adapter_rank >= self.backbone.feature_dim {
                return Err(at(
                    "adapter_rank",
                    format!(
                        "adapter_rank ({}) must be smaller than backbone.feature_dim ({})",
                        run.adapter_rank, self.backbone.feature_dim
                    ),
                ));
            }
            if !is_safe_name(&label) {
                return Err(at("name", format!("run name {label:?} is not a safe file name")));
            }
            if !names.insert(label.clone()) {
                return Err(at("name", format!("duplicate run name {label:?}; set `name` to disambiguate")));
            }
        }
        Ok(())
    }

    /// Stream configuration with the global seed applied.
    pub fn effective_stream(&self) -> StreamConfig {
        StreamConfig {
            seed: self.stream.seed.wrapping_add(self.seed),
            ..self.stream.clone()
        }
    }

    /// Run configurations with the global seed applied.
    pub fn effective_runs(&self) -> Vec<StrategyConfig> {
        self.runs
            .iter()
            .map(|r| StrategyConfig {
                name: Some(r.label()),
                seed: r.seed.wrapping_add(self.seed),
                ..r.clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{HeadKind, InitMode, Strategy as Tag};
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
[[runs]]
strategy = "daf"
init = "robust"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.stream, StreamConfig::default());
        assert_eq!(cfg.runs.len(), 1);
        assert_eq!(cfg.runs[0].label(), "daf-robust");
        assert!(cfg.output.checkpoints);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "seed = 1\n\n[stream]\nnum_taks = 3\n\n[[runs]]\nstrategy = \"daf\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("num_taks"), "{err}");

        let text = "[[runs]]\nstrategy = \"daf\"\nbogus = 1\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn bad_enum_value_has_line() {
        let text = "[[runs]]\ninit = \"robust\"\nstrategy = \"dafx\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn validation_errors_are_anchored() {
        let text = "[stream]\nseparation = -1.0\n\n[[runs]]\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.starts_with("configuration error: line 2:"), "{err}");

        let text = "[stream]\ninput_dim = 16\n\n[[runs]]\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("backbone.input_dim"), "{err}");

        let text = "[[runs]]\nstrategy = \"daf\"\n\n[[runs]]\nstrategy = \"daf\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("duplicate"), "{err}");

        let text = "[backbone]\nfeature_dim = 8\n\n[[runs]]\nname = \"x\"\nadapter_rank = 8\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("adapter_rank"), "{err}");

        let text = "[[runs]]\nstrategy = \"ema\"\nema_decay = 2.0\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("ema_decay"), "{err}");

        let text = "[stream]\nseparation = 3.0\nnoise = -1.0\n\n[[runs]]\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unsafe_names_are_rejected() {
        for name in ["../x", "a/b", ".hidden", ""] {
            let text = format!("[[runs]]\nname = {name:?}\n");
            assert!(ExperimentConfig::parse(&text).is_err(), "{name}");
        }
    }

    #[test]
    fn empty_runs_rejected() {
        assert!(ExperimentConfig::parse("runs = []\n").is_err());
        assert!(ExperimentConfig::parse("seed = 3\n").is_err());
    }

    #[test]
    fn seeds_are_offset_by_global_seed() {
        let text = "seed = 10\n[stream]\nseed = 5\n[[runs]]\nseed = 2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.effective_stream().seed, 15);
        assert_eq!(cfg.effective_runs()[0].seed, 12);
        assert_eq!(cfg.effective_runs()[0].name.as_deref(), Some("daf-robust"));
    }

    fn strategy() -> impl Strategy<Value = Tag> {
        prop::sample::select(Tag::ALL.to_vec())
    }

    fn init() -> impl Strategy<Value = InitMode> {
        prop::sample::select(vec![InitMode::Random, InitMode::PreviousTask, InitMode::Robust])
    }

    proptest! {
        #[test]
        fn round_trip(
            seed in 0u64..i64::MAX as u64,
            sep in 0.1f64..100.0,
            picks in prop::collection::vec((strategy(), init(), 0.0f64..=1.0, 0.0f64..1.0), 1..6),
            dir in prop::option::of("[a-z]{1,8}"),
        ) {
            let runs = picks
                .iter()
                .enumerate()
                .map(|(i, &(s, m, gamma, decay))| {
                    let mut r = StrategyConfig {
                        name: Some(format!("run{i}")),
                        strategy: s,
                        init: m,
                        ema_decay: decay,
                        seed: i as u64,
                        head: if i % 2 == 0 { HeadKind::Linear } else { HeadKind::Cosine },
                        cosine_scale: 8.0 + decay,
                        ..StrategyConfig::default()
                    };
                    r.fusion.gamma = gamma;
                    r
                })
                .collect();
            let cfg = ExperimentConfig {
                seed,
                stream: StreamConfig { separation: sep, ..StreamConfig::default() },
                backbone: BackboneConfig::default(),
                output: OutputConfig { dir: dir.map(PathBuf::from), ..OutputConfig::default() },
                verify: VerifyToggle { enabled: seed % 2 == 0, seed: seed / 3 },
                runs,
            };
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
