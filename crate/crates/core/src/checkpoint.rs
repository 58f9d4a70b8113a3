//! Checkpoints: a JSON manifest plus a flat little-endian `f64` payload.
//!
//! `<name>.ckpt` holds the manifest and `<name>.ckpt.bin` the payload. Every
//! segment carries its offset and length (in values) and a SHA-256 of its
//! bytes; the payload as a whole is hashed too. Both files are written
//! atomically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassGaussian, ClassPrototype};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::harness::{FinalState, Strategy};
use crate::model::{Layout, ParameterVector};
use crate::stats::FusionStatistics;

pub const FORMAT_VERSION: u32 = 1;

const THETA_STAR: &str = "theta_star";
const THETA_AVG: &str = "theta_avg";
const ADAPTER: &str = "adapter";
const GRAD: &str = "grad";
const FISHER: &str = "fisher";
const PROTOTYPE: &str = "prototype/";
const GAUSSIAN_MU: &str = "gaussian_mu/";
const GAUSSIAN_VAR: &str = "gaussian_var/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Final state of a run: global adapter, average, classifier stores.
    RunState,
    /// A single adapter-shaped vector.
    Adapter,
    /// Gradient and Fisher diagonal of one task.
    Statistics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub layout: Layout,
    pub task_index: usize,
    pub strategy: Option<Strategy>,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub payload_len: usize,
    pub payload_sha256: String,
    pub segments: Vec<SegmentEntry>,
}

/// In-memory checkpoint. Segments are kept in name order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub layout: Layout,
    pub task_index: usize,
    pub strategy: Option<Strategy>,
    pub segments: BTreeMap<String, Vec<f64>>,
}

impl PartialEq for Checkpoint {
    /// Bitwise on segment values.
    fn eq(&self, other: &Self) -> bool {
        let bits = |s: &BTreeMap<String, Vec<f64>>| {
            s.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        self.kind == other.kind
            && self.layout == other.layout
            && self.task_index == other.task_index
            && self.strategy == other.strategy
            && bits(&self.segments) == bits(&other.segments)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn new(kind: CheckpointKind, layout: Layout, task_index: usize, strategy: Option<Strategy>) -> Self {
        Self {
            kind,
            layout,
            task_index,
            strategy,
            segments: BTreeMap::new(),
        }
    }

    /// Final state of a run after `task_index` tasks.
    pub fn from_run_state(state: &FinalState, task_index: usize, strategy: Strategy) -> Self {
        let mut c = Self::new(
            CheckpointKind::RunState,
            state.theta_star.layout().clone(),
            task_index,
            Some(strategy),
        );
        c.segments.insert(THETA_STAR.into(), state.theta_star.data().to_vec());
        if let Some(avg) = &state.theta_avg {
            c.segments.insert(THETA_AVG.into(), avg.data().to_vec());
        }
        if let Some(f) = &state.last_fusion {
            c.segments.insert(GRAD.into(), f.stats.grad.data().to_vec());
            c.segments.insert(FISHER.into(), f.stats.fisher.data().to_vec());
        }
        for (class, p) in &state.prototypes {
            c.segments.insert(format!("{PROTOTYPE}{class}"), p.weight().to_vec());
        }
        for (class, g) in &state.gaussians {
            c.segments.insert(format!("{GAUSSIAN_MU}{class}"), g.mu.clone());
            c.segments.insert(format!("{GAUSSIAN_VAR}{class}"), g.var.clone());
        }
        c
    }

    pub fn from_adapter(v: &ParameterVector, task_index: usize, strategy: Option<Strategy>) -> Self {
        let mut c = Self::new(CheckpointKind::Adapter, v.layout().clone(), task_index, strategy);
        c.segments.insert(ADAPTER.into(), v.data().to_vec());
        c
    }

    pub fn from_statistics(s: &FusionStatistics, task_index: usize, strategy: Option<Strategy>) -> Self {
        let mut c = Self::new(CheckpointKind::Statistics, s.grad.layout().clone(), task_index, strategy);
        c.segments.insert(GRAD.into(), s.grad.data().to_vec());
        c.segments.insert(FISHER.into(), s.fisher.data().to_vec());
        c
    }

    fn vector(&self, name: &str) -> Result<ParameterVector> {
        let data = self
            .segments
            .get(name)
            .ok_or_else(|| bad(format!("{:?} checkpoint has no {name} segment", self.kind)))?;
        ParameterVector::new(self.layout.clone(), data.clone())
    }

    /// The adapter a checkpoint stands for: `adapter`, or `theta_star` of a run.
    pub fn primary_adapter(&self) -> Result<ParameterVector> {
        match self.kind {
            CheckpointKind::Adapter => self.vector(ADAPTER),
            CheckpointKind::RunState => self.vector(THETA_STAR),
            CheckpointKind::Statistics => Err(bad("statistics checkpoint holds no adapter")),
        }
    }

    pub fn theta_avg(&self) -> Option<Result<ParameterVector>> {
        self.segments.contains_key(THETA_AVG).then(|| self.vector(THETA_AVG))
    }

    /// Gradient and Fisher segments, from a statistics or run checkpoint.
    pub fn statistics(&self) -> Result<FusionStatistics> {
        FusionStatistics::new(self.vector(GRAD)?, self.vector(FISHER)?)
    }

    pub fn prototypes(&self) -> Result<BTreeMap<ClassId, ClassPrototype>> {
        self.per_class(PROTOTYPE)?
            .into_iter()
            .map(|(c, w)| Ok((c, ClassPrototype::from_direction(c, w.clone())?)))
            .collect()
    }

    pub fn gaussians(&self) -> Result<BTreeMap<ClassId, ClassGaussian>> {
        let mus = self.per_class(GAUSSIAN_MU)?;
        let vars = self.per_class(GAUSSIAN_VAR)?;
        if mus.keys().ne(vars.keys()) {
            return Err(bad("gaussian mean and variance segments disagree"));
        }
        mus.into_iter()
            .map(|(c, mu)| {
                let var = vars[&c].clone();
                if var.len() != mu.len() {
                    return Err(bad(format!("gaussian {c}: mean/variance length mismatch")));
                }
                Ok((c, ClassGaussian { class: c, mu: mu.clone(), var }))
            })
            .collect()
    }

    fn per_class(&self, prefix: &str) -> Result<BTreeMap<ClassId, &Vec<f64>>> {
        self.segments
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|c| (c, v)))
            .map(|(c, v)| {
                let id = c.parse::<ClassId>().map_err(|_| bad(format!("bad class id in segment {prefix}{c}")))?;
                Ok((id, v))
            })
            .collect()
    }

    /// Structural checks shared by [`encode`] and [`decode`].
    fn validate(&self) -> Result<()> {
        self.layout
            .validate()
            .map_err(|e| bad(format!("invalid layout: {e}")))?;
        let required: &[&str] = match self.kind {
            CheckpointKind::RunState => &[THETA_STAR],
            CheckpointKind::Adapter => &[ADAPTER],
            CheckpointKind::Statistics => &[GRAD, FISHER],
        };
        for name in required {
            if !self.segments.contains_key(*name) {
                return Err(bad(format!("{:?} checkpoint is missing segment {name}", self.kind)));
            }
        }
        for name in [THETA_STAR, THETA_AVG, ADAPTER, GRAD, FISHER] {
            if let Some(v) = self.segments.get(name) {
                if v.len() != self.layout.len() {
                    return Err(bad(format!(
                        "segment {name} has {} values, layout needs {}",
                        v.len(),
                        self.layout.len()
                    )));
                }
            }
        }
        if let Some((name, _)) = self.segments.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(bad(format!("segment {name} has non-finite values")));
        }
        Ok(())
    }
}

/// Serialises to `(manifest JSON, payload bytes)`.
pub fn encode(ckpt: &Checkpoint, payload_name: &str) -> Result<(String, Vec<u8>)> {
    ckpt.validate()?;
    let mut payload = Vec::new();
    let mut segments = Vec::with_capacity(ckpt.segments.len());
    let mut offset = 0;
    for (name, values) in &ckpt.segments {
        let bytes = to_bytes(values);
        segments.push(SegmentEntry {
            name: name.clone(),
            offset,
            len: values.len(),
            sha256: sha256_hex(&bytes),
        });
        offset += values.len();
        payload.extend(bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind,
        layout: ckpt.layout.clone(),
        task_index: ckpt.task_index,
        strategy: ckpt.strategy,
        payload: payload_name.to_string(),
        payload_len: offset,
        payload_sha256: sha256_hex(&payload),
        segments,
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| bad(e.to_string()))?;
    json.push('\n');
    Ok((json, payload))
}

/// Parses a manifest and its payload, checking lengths and hashes.
pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Checkpoint> {
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| bad(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", m.format_version)));
    }
    if payload.len() % 8 != 0 || payload.len() / 8 != m.payload_len {
        return Err(bad(format!(
            "payload is {} bytes, manifest declares {} values",
            payload.len(),
            m.payload_len
        )));
    }
    if sha256_hex(payload) != m.payload_sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let mut segments = BTreeMap::new();
    let mut expected_offset = 0usize;
    for s in &m.segments {
        if s.offset != expected_offset {
            return Err(bad(format!("segment {} is not contiguous", s.name)));
        }
        let end = s
            .offset
            .checked_add(s.len)
            .filter(|&e| e <= m.payload_len)
            .ok_or_else(|| bad(format!("segment {} overruns the payload", s.name)))?;
        let bytes = &payload[s.offset * 8..end * 8];
        if sha256_hex(bytes) != s.sha256 {
            return Err(bad(format!("segment {} hash mismatch", s.name)));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if segments.insert(s.name.clone(), values).is_some() {
            return Err(bad(format!("duplicate segment {}", s.name)));
        }
        expected_offset = end;
    }
    if expected_offset != m.payload_len {
        return Err(bad("segments do not cover the payload"));
    }
    let ckpt = Checkpoint {
        kind: m.kind,
        layout: m.layout,
        task_index: m.task_index,
        strategy: m.strategy,
        segments,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    // Same mode as a plain create; the umask still applies.
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o666));
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Payload path for a manifest path: `<path>.bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes the payload, then the manifest.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let payload_file = payload_path(path);
    let name = payload_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| bad(format!("unusable checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, payload) = encode(ckpt, &name)?;
    write_atomic(&payload_file, &payload)?;
    write_atomic(path, manifest.as_bytes())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let manifest = std::fs::read(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&manifest)
        .map_err(|e| bad(format!("{}: {e}", path.display())))?;
    if m.payload.contains('/') || m.payload.contains('\\') || m.payload.starts_with('.') {
        return Err(bad(format!("payload name {:?} must be a plain file name", m.payload)));
    }
    let payload_file = path.parent().unwrap_or(Path::new(".")).join(&m.payload);
    let payload = std::fs::read(&payload_file)
        .map_err(|e| bad(format!("cannot read {}: {e}", payload_file.display())))?;
    decode(&manifest, &payload).map_err(|e| match e {
        Error::Checkpoint(msg) => bad(format!("{}: {msg}", path.display())),
        other => other,
    })
}
