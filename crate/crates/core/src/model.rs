//! Frozen MLP backbone with parallel bottleneck adapters.
//!
//! Each block computes `MLP(h) + ReLU(h W_down) W_up`, where the block MLP is
//! a residual feed-forward `h + ReLU(h W_1 + b_1) W_2`. A linear stem maps the
//! raw input to the feature width `d` before the first block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, LabelIndex};
use crate::error::{Error, Result};
use crate::numerics::{self, NodeId, Tape, Tensor};
use crate::optim::{self, SgdConfig};

/// Which adapter matrix a layout segment holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub matrix: MatrixKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Describes how a flat parameter vector maps onto adapter matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    /// Layout of `layers` adapters of width `dim` and rank `rank`:
    /// per layer `W_down (dim x rank)` followed by `W_up (rank x dim)`.
    pub fn for_adapter(layers: usize, dim: usize, rank: usize) -> Self {
        let mut segments = Vec::with_capacity(2 * layers);
        let mut offset = 0;
        for layer in 0..layers {
            for (matrix, rows, cols) in [(MatrixKind::Down, dim, rank), (MatrixKind::Up, rank, dim)] {
                segments.push(Segment {
                    layer,
                    matrix,
                    rows,
                    cols,
                    offset,
                });
                offset += rows * cols;
            }
        }
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks offsets are contiguous and shapes positive.
    pub fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for s in &self.segments {
            if s.rows == 0 || s.cols == 0 || s.offset != offset {
                return Err(Error::Layout(format!("malformed segment {s:?}")));
            }
            offset += s.len();
        }
        Ok(())
    }
}

/// Flat adapter parameters together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Layout,
    data: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if layout.len() != data.len() {
            return Err(Error::Layout(format!(
                "layout expects {} values, got {}",
                layout.len(),
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(layout: &Layout) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout: layout.clone(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), data)
    }

    pub fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Layout(format!(
                "vectors of length {} and {} have different layouts",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub down: Tensor,
    pub up: Tensor,
}

/// One bottleneck adapter per backbone block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    layers: Vec<AdapterLayer>,
    dim: usize,
    rank: usize,
}

impl Adapter {
    pub fn new(layers: Vec<AdapterLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::contract("adapter needs at least one layer"))?;
        let (dim, rank) = (first.down.rows(), first.down.cols());
        if rank >= dim {
            return Err(Error::contract(format!(
                "adapter rank {rank} must be smaller than width {dim}"
            )));
        }
        for l in &layers {
            if l.down.shape() != [dim, rank] || l.up.shape() != [rank, dim] {
                return Err(Error::Shape {
                    op: "adapter",
                    left: l.down.shape().to_vec(),
                    right: l.up.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers, dim, rank })
    }

    pub fn zeros(num_layers: usize, dim: usize, rank: usize) -> Result<Self> {
        Self::new(
            (0..num_layers)
                .map(|_| AdapterLayer {
                    down: Tensor::zeros(&[dim, rank]),
                    up: Tensor::zeros(&[rank, dim]),
                })
                .collect(),
        )
    }

    /// `W_down ~ U(-1/sqrt(d), 1/sqrt(d))`, `W_up = 0`: an exact no-op.
    pub fn init_random(num_layers: usize, dim: usize, rank: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| {
                let down = (0..dim * rank)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Ok(AdapterLayer {
                    down: Tensor::matrix(dim, rank, down)?,
                    up: Tensor::zeros(&[rank, dim]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layout(&self) -> Layout {
        Layout::for_adapter(self.layers.len(), self.dim, self.rank)
    }

    pub fn flatten(&self) -> ParameterVector {
        let layout = self.layout();
        let mut data = Vec::with_capacity(layout.len());
        for l in &self.layers {
            data.extend_from_slice(l.down.data());
            data.extend_from_slice(l.up.data());
        }
        ParameterVector { layout, data }
    }

    pub fn unflatten(vector: &ParameterVector) -> Result<Self> {
        let layout = vector.layout();
        layout.validate()?;
        let mut layers = Vec::new();
        for pair in layout.segments.chunks(2) {
            let [down, up] = pair else {
                return Err(Error::Layout("odd number of segments".into()));
            };
            if down.matrix != MatrixKind::Down || up.matrix != MatrixKind::Up {
                return Err(Error::Layout("segments out of down/up order".into()));
            }
            layers.push(AdapterLayer {
                down: Tensor::matrix(down.rows, down.cols, vector.data[down.range()].to_vec())?,
                up: Tensor::matrix(up.rows, up.cols, vector.data[up.range()].to_vec())?,
            });
        }
        Self::new(layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}

/// Shape of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_blocks: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            feature_dim: 32,
            num_blocks: 2,
        }
    }
}

/// Feature extractor whose weights become immutable once frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    stem_w: Tensor,
    stem_b: Tensor,
    blocks: Vec<Block>,
    frozen: bool,
}

/// Node handles produced when a forward pass is recorded.
pub(crate) struct Recorded {
    pub features: NodeId,
    /// `(W_down, W_up)` per layer when the adapter was recorded as parameters.
    pub adapter: Vec<(NodeId, NodeId)>,
}

impl Backbone {
    /// He-style random initialisation.
    pub fn init(spec: BackboneSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.feature_dim == 0 || spec.num_blocks == 0 {
            return Err(Error::config(format!("invalid backbone shape {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, std: f64| -> Result<Tensor> {
            let n = Normal::new(0.0, std).expect("positive std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let (d_in, d) = (spec.input_dim, spec.feature_dim);
        let stem_w = gaussian(d_in, d, (1.0 / d_in as f64).sqrt())?;
        let blocks = (0..spec.num_blocks)
            .map(|_| {
                Ok(Block {
                    w1: gaussian(d, d, (2.0 / d as f64).sqrt())?,
                    b1: Tensor::zeros(&[1, d]),
                    w2: gaussian(d, d, (0.5 / d as f64).sqrt())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            stem_w,
            stem_b: Tensor::zeros(&[1, d]),
            blocks,
            frozen: false,
        })
    }

    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// SHA-256 over the bit patterns of every weight.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.weights() {
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn weights(&self) -> Vec<&Tensor> {
        let mut w = vec![&self.stem_w, &self.stem_b];
        for b in &self.blocks {
            w.extend([&b.w1, &b.b1, &b.w2]);
        }
        w
    }

    fn check_adapter(&self, adapter: &Adapter) -> Result<()> {
        if adapter.dim() != self.dim() || adapter.num_layers() != self.blocks.len() {
            return Err(Error::Shape {
                op: "adapter attach",
                left: vec![self.blocks.len(), self.dim()],
                right: vec![adapter.num_layers(), adapter.dim()],
            });
        }
        Ok(())
    }

    /// Frozen block MLP of `layer` applied to `x (batch x d)`.
    pub fn mlp_forward(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        let block = self.block(layer)?;
        let hidden = numerics::relu(&numerics::add_row(&numerics::matmul(x, &block.w1)?, &block.b1)?);
        numerics::add(x, &numerics::matmul(&hidden, &block.w2)?)
    }

    /// `MLP(x) + ReLU(x W_down) W_up` for one block.
    pub fn adapter_forward(&self, x: &Tensor, layer: usize, adapter: &Adapter) -> Result<Tensor> {
        self.check_adapter(adapter)?;
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "adapter_forward",
                left: x.shape().to_vec(),
                right: vec![self.dim()],
            });
        }
        let a = &adapter.layers[layer];
        let branch = numerics::matmul(&numerics::relu(&numerics::matmul(x, &a.down)?), &a.up)?;
        numerics::add(&self.mlp_forward(x, layer)?, &branch)
    }

    /// Stem projection of raw inputs.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        numerics::add_row(&numerics::matmul(x, &self.stem_w)?, &self.stem_b)
    }

    /// Final features of `x (batch x input_dim)` with the adapter attached.
    pub fn features(&self, x: &Tensor, adapter: &Adapter) -> Result<Tensor> {
        let mut h = self.embed(x)?;
        for layer in 0..self.blocks.len() {
            h = self.adapter_forward(&h, layer, adapter)?;
        }
        Ok(h)
    }

    /// Features without any adapter.
    pub fn plain_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.embed(x)?;
        for layer in 0..self.blocks.len() {
            h = self.mlp_forward(&h, layer)?;
        }
        Ok(h)
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        self.blocks
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no block {layer}")))
    }

    /// Records the forward pass with the backbone as constants.
    ///
    /// Adapter matrices are recorded as parameters when `adapter_params` is
    /// set, otherwise as constants.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        x: NodeId,
        adapter: Option<&Adapter>,
        adapter_params: bool,
    ) -> Result<Recorded> {
        let weights: Vec<NodeId> = self
            .weights()
            .into_iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let adapter_nodes = match adapter {
            Some(a) => {
                self.check_adapter(a)?;
                a.layers
                    .iter()
                    .map(|l| {
                        if adapter_params {
                            (tape.param(l.down.clone()), tape.param(l.up.clone()))
                        } else {
                            (tape.constant(l.down.clone()), tape.constant(l.up.clone()))
                        }
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        let features = self.record_with(tape, x, &weights, &adapter_nodes)?;
        Ok(Recorded {
            features,
            adapter: adapter_nodes,
        })
    }

    /// Records the forward pass around adapter nodes created by the caller.
    pub(crate) fn record_with_adapter(
        &self,
        tape: &mut Tape,
        x: NodeId,
        adapter: &[(NodeId, NodeId)],
    ) -> Result<NodeId> {
        if adapter.len() != self.blocks.len() {
            return Err(Error::Shape {
                op: "record_with_adapter",
                left: vec![self.blocks.len()],
                right: vec![adapter.len()],
            });
        }
        let weights: Vec<NodeId> = self
            .weights()
            .into_iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        self.record_with(tape, x, &weights, adapter)
    }

    /// Forward pass over already-recorded weight nodes, in `weights()` order.
    fn record_with(
        &self,
        tape: &mut Tape,
        x: NodeId,
        weights: &[NodeId],
        adapter: &[(NodeId, NodeId)],
    ) -> Result<NodeId> {
        let stem = tape.matmul(x, weights[0])?;
        let mut h = tape.add_row(stem, weights[1])?;
        for layer in 0..self.blocks.len() {
            let w = &weights[2 + 3 * layer..5 + 3 * layer];
            let z = tape.matmul(h, w[0])?;
            let z = tape.add_row(z, w[1])?;
            let z = tape.relu(z);
            let z = tape.matmul(z, w[2])?;
            let mut out = tape.add(h, z)?;
            if let Some(&(down, up)) = adapter.get(layer) {
                let a = tape.matmul(h, down)?;
                let a = tape.relu(a);
                let a = tape.matmul(a, up)?;
                out = tape.add(out, a)?;
            }
            h = out;
        }
        Ok(h)
    }
}

/// Trains a fresh backbone with a throwaway linear head, then freezes it.
///
/// `epochs == 0` yields the frozen random initialisation.
pub fn pretrain_backbone(
    spec: BackboneSpec,
    data: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<Backbone> {
    if data.is_empty() {
        return Err(Error::config("pretraining dataset is empty"));
    }
    if data.input_dim() != spec.input_dim {
        return Err(Error::Shape {
            op: "pretrain_backbone",
            left: vec![data.input_dim()],
            right: vec![spec.input_dim],
        });
    }
    let backbone = Backbone::init(spec, seed)?;
    if sgd.epochs == 0 {
        return Ok(backbone.freeze());
    }
    let index = LabelIndex::new(data.classes());
    let targets = index.map(data.labels())?;
    let head = Head::init(spec.feature_dim, index.len(), seed ^ 0x5eed);

    let mut groups: Vec<Tensor> = backbone.weights().into_iter().cloned().collect();
    let n_backbone = groups.len();
    groups.push(head.weight);
    groups.push(head.bias);
    let template = backbone.clone();
    optim::fit(&mut groups, data, &targets, sgd, seed.wrapping_add(1), |tape, p, x| {
        let features = template.record_with(tape, x, &p[..n_backbone], &[])?;
        let logits = tape.matmul(features, p[n_backbone])?;
        tape.add_row(logits, p[n_backbone + 1])
    })?;

    let mut it = groups.into_iter();
    let mut trained = template;
    trained.stem_w = it.next().expect("stem weight");
    trained.stem_b = it.next().expect("stem bias");
    for block in &mut trained.blocks {
        block.w1 = it.next().expect("block w1");
        block.b1 = it.next().expect("block b1");
        block.w2 = it.next().expect("block w2");
    }
    Ok(trained.freeze())
}

/// Classification head used only while training.
///
/// Linear heads produce `f W + b`. Cosine heads produce
/// `s * cos(f, W[:, c]) + b_c`, which ties the training signal to feature
/// directions the way the prototype classifier does.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
    pub cosine_scale: Option<f64>,
}

impl Head {
    /// Linear head with `N(0, 0.01)` weights and zero bias.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.01).expect("positive std");
        let weight = (0..dim * classes).map(|_| n.sample(&mut rng)).collect();
        Self {
            weight: Tensor::matrix(dim, classes, weight).expect("finite init"),
            bias: Tensor::zeros(&[1, classes]),
            cosine_scale: None,
        }
    }

    /// Cosine head with logit scale `scale`.
    pub fn cosine(dim: usize, classes: usize, scale: f64, seed: u64) -> Self {
        Self {
            cosine_scale: Some(scale),
            ..Self::init(dim, classes, seed)
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    /// Records the logits for `features` given the head's weight and bias nodes.
    pub(crate) fn record(
        tape: &mut Tape,
        features: NodeId,
        weight: NodeId,
        bias: NodeId,
        cosine_scale: Option<f64>,
    ) -> Result<NodeId> {
        let logits = match cosine_scale {
            None => tape.matmul(features, weight)?,
            Some(s) => {
                let f = tape.normalize_rows(features)?;
                let wt = tape.transpose(weight)?;
                let wt = tape.normalize_rows(wt)?;
                let w = tape.transpose(wt)?;
                let z = tape.matmul(f, w)?;
                tape.scale(z, s)?
            }
        };
        tape.add_row(logits, bias)
    }

    /// Logits of `features (batch x dim)`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let z = Self::record(&mut tape, f, w, b, self.cosine_scale)?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_backbone() -> Backbone {
        Backbone::init(
            BackboneSpec {
                input_dim: 5,
                feature_dim: 4,
                num_blocks: 2,
            },
            7,
        )
        .unwrap()
        .freeze()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_down_projection_is_identity_on_mlp() {
        let bb = small_backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        let mut adapter = Adapter::zeros(2, 4, 2).unwrap();
        adapter.layers[0].up = random(&mut rng, 2, 4);
        assert_eq!(bb.adapter_forward(&x, 0, &adapter).unwrap(), bb.mlp_forward(&x, 0).unwrap());
    }

    #[test]
    fn negative_branch_is_killed() {
        let bb = small_backbone();
        let x = Tensor::matrix(2, 4, vec![1.0, 2.0, 0.5, 1.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut adapter = Adapter::zeros(2, 4, 2).unwrap();
        adapter.layers[1].down = Tensor::filled(&[4, 2], -1.0);
        adapter.layers[1].up = Tensor::filled(&[2, 4], 5.0);
        assert_eq!(bb.adapter_forward(&x, 1, &adapter).unwrap(), bb.mlp_forward(&x, 1).unwrap());
    }

    #[test]
    fn adapter_forward_matches_composed_oracle() {
        let bb = small_backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4);
        let adapter = Adapter::new(vec![
            AdapterLayer {
                down: random(&mut rng, 4, 2),
                up: random(&mut rng, 2, 4),
            },
            AdapterLayer {
                down: random(&mut rng, 4, 2),
                up: random(&mut rng, 2, 4),
            },
        ])
        .unwrap();
        let got = bb.adapter_forward(&x, 0, &adapter).unwrap();
        let mlp = bb.mlp_forward(&x, 0).unwrap();
        let a = &adapter.layers[0];
        for i in 0..3 {
            for j in 0..4 {
                let mut branch = 0.0;
                for k in 0..2 {
                    let mut pre = 0.0;
                    for p in 0..4 {
                        pre += x.get(i, p) * a.down.get(p, k);
                    }
                    branch += pre.max(0.0) * a.up.get(k, j);
                }
                assert!((got.get(i, j) - (mlp.get(i, j) + branch)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let bb = small_backbone();
        let adapter = Adapter::zeros(2, 4, 2).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(bb.adapter_forward(&x, 0, &adapter), Err(Error::Shape { .. })));
    }

    #[test]
    fn flatten_lengths() {
        let v = Adapter::zeros(2, 3, 1).unwrap().flatten();
        assert_eq!(v.len(), 12);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(Adapter::zeros(2, 32, 4).unwrap().flatten().len(), 2 * 2 * 32 * 4);
    }

    #[test]
    fn rank_must_be_below_width() {
        assert!(Adapter::zeros(1, 4, 4).is_err());
    }

    #[test]
    fn init_is_a_noop() {
        let bb = small_backbone();
        let adapter = Adapter::init_random(2, 4, 2, 3).unwrap();
        let x = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(bb.features(&x, &adapter).unwrap(), bb.plain_features(&x).unwrap());
    }

    #[test]
    fn backbone_gets_no_gradient_through_adapter() {
        let bb = small_backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adapter = Adapter::new(
            (0..2)
                .map(|_| AdapterLayer {
                    down: random(&mut rng, 4, 2),
                    up: random(&mut rng, 2, 4),
                })
                .collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, 3, 5));
        let weights: Vec<NodeId> = bb.weights().into_iter().map(|w| tape.constant(w.clone())).collect();
        let nodes: Vec<(NodeId, NodeId)> = adapter
            .layers()
            .iter()
            .map(|l| (tape.param(l.down.clone()), tape.param(l.up.clone())))
            .collect();
        let f = bb.record_with(&mut tape, x, &weights, &nodes).unwrap();
        let loss = tape.sum_squares(f).unwrap();
        let g = tape.backward(loss).unwrap();
        for w in weights {
            assert!(g.get(w).is_none());
            assert!(g.wrt(w).data().iter().all(|&v| v == 0.0));
        }
        assert!(g.wrt(nodes[0].1).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn recorded_forward_matches_direct() {
        let bb = small_backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adapter = Adapter::new(
            (0..2)
                .map(|_| AdapterLayer {
                    down: random(&mut rng, 4, 2),
                    up: random(&mut rng, 2, 4),
                })
                .collect(),
        )
        .unwrap();
        let x = random(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let rec = bb.record(&mut tape, xi, Some(&adapter), true).unwrap();
        assert_eq!(tape.value(rec.features), &bb.features(&x, &adapter).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn flatten_unflatten_round_trip(values in proptest::collection::vec(-10.0f64..10.0, 2 * 2 * 6 * 2)) {
            let layout = Layout::for_adapter(2, 6, 2);
            let v = ParameterVector::new(layout, values).unwrap();
            let back = Adapter::unflatten(&v).unwrap().flatten();
            proptest::prop_assert_eq!(back, v);
        }

        #[test]
        fn residual_norm_equals_branch_norm(seed in 0u64..5_000) {
            let bb = small_backbone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 2, 4);
            let adapter = Adapter::new((0..2).map(|_| AdapterLayer {
                down: random(&mut rng, 4, 2), up: random(&mut rng, 2, 4),
            }).collect()).unwrap();
            let out = bb.adapter_forward(&x, 1, &adapter).unwrap();
            let mlp = bb.mlp_forward(&x, 1).unwrap();
            let a = &adapter.layers()[1];
            let branch = numerics::matmul(&numerics::relu(&numerics::matmul(&x, &a.down).unwrap()), &a.up).unwrap();
            let lhs: f64 = out.data().iter().zip(mlp.data()).map(|(o, m)| (o - m).powi(2)).sum::<f64>().sqrt();
            let rhs: f64 = branch.data().iter().map(|b| b * b).sum::<f64>().sqrt();
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}
