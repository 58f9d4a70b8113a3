//! Dense f64 tensors and a tape-based reverse-mode differentiator.
//!
//! Everything here is row-major and small. A [`Tape`] records primitive
//! operations in the order they are issued, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

/// Row-major dense array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::contract(format!(
                "tensor shape must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    /// Builds a matrix from a `rows x cols` buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (1-D tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { shape, data }
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Evaluation(format!(
            "{op} produced non-finite value at index {i}"
        ))),
        None => Ok(()),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape.clone(),
            right: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product of `a (m x k)` and `b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    check_finite("matmul", &out)?;
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// `a^T b` without materialising the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let b_row = &b.data[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a b^T` without materialising the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let k = b.rows();
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a.data[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b.data[p * n..(p + 1) * n];
            out[i * k + p] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_raw(
        x.shape.clone(),
        x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    check_finite("add", &out)?;
    Ok(Tensor::from_raw(a.shape.clone(), out))
}

/// Adds a `1 x n` row to every row of an `m x n` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("add_row", a)?;
    if row.len() != n {
        return Err(Error::Shape {
            op: "add_row",
            left: a.shape.clone(),
            right: row.shape.clone(),
        });
    }
    let mut out = a.data.clone();
    for i in 0..m {
        for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
            *o += r;
        }
    }
    check_finite("add_row", &out)?;
    Ok(Tensor::from_raw(a.shape.clone(), out))
}

const NORMALIZE_EPS: f64 = 1e-12;

/// Matrix transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_raw(vec![n, m], out))
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    /// Row-wise `x / sqrt(|x|^2 + eps)`; caches the denominators.
    NormalizeRows(NodeId, Vec<f64>),
    Sum(NodeId),
    SumSquares(NodeId),
    /// Mean softmax cross-entropy; caches the row-wise softmax.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any parameter node reaches this node.
    tracked: bool,
}

/// Recording of primitive operations for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = add(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, tracked))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = add_row(self.value(a), self.value(row))?;
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), v, tracked))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = relu(self.value(x));
        let tracked = self.tracked(&[x]);
        self.push(Op::Relu(x), v, tracked)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let src = self.value(x);
        let data: Vec<f64> = src.data.iter().map(|v| v * c).collect();
        check_finite("scale", &data)?;
        let v = Tensor::from_raw(src.shape.clone(), data);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Scale(x, c), v, tracked))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = transpose(self.value(x))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Transpose(x), v, tracked))
    }

    /// Scales each row to unit norm; `1e-12` under the root keeps zero rows finite.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let (m, n) = require_matrix("normalize_rows", src)?;
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = src.row(i);
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
            data.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        check_finite("normalize_rows", &data)?;
        let v = Tensor::from_raw(vec![m, n], data);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::NormalizeRows(x, norms), v, tracked))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data.iter().sum());
        let tracked = self.tracked(&[x]);
        self.push(Op::Sum(x), v, tracked)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data.iter().map(|v| v * v).sum();
        check_finite("sum_squares", &[s])?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::SumSquares(x), Tensor::scalar(s), tracked))
    }

    /// Mean softmax cross-entropy of `logits (batch x classes)` against
    /// integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let (m, c) = require_matrix("cross_entropy", z)?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: z.shape.clone(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                norm += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= norm;
            }
            loss += norm.ln() + max - row[labels[i]];
        }
        loss /= m as f64;
        check_finite("cross_entropy", &[loss])?;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            tracked,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let upstream = Tensor::from_raw(node.value.shape.clone(), g.clone());
                    if self.nodes[a.0].tracked {
                        let ga = matmul_nt(&upstream, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].tracked {
                        let gb = matmul_tn(self.value(*a), &upstream);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].tracked {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].tracked {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[a.0].tracked {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[row.0].tracked {
                        let n = node.value.cols();
                        let mut gr = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            for (o, v) in gr.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                }
                Op::Relu(x) => {
                    if self.nodes[x.0].tracked {
                        let input = &self.value(*x).data;
                        let gx = g
                            .iter()
                            .zip(input)
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Scale(x, c) => {
                    if self.nodes[x.0].tracked {
                        accumulate(&mut grads, *x, g.iter().map(|v| v * c).collect());
                    }
                }
                Op::Transpose(x) => {
                    if self.nodes[x.0].tracked {
                        let upstream = Tensor::from_raw(node.value.shape.clone(), g.clone());
                        accumulate(&mut grads, *x, transpose(&upstream)?.data);
                    }
                }
                Op::NormalizeRows(x, norms) => {
                    if self.nodes[x.0].tracked {
                        let input = self.value(*x);
                        let n = input.cols();
                        let mut gx = Vec::with_capacity(g.len());
                        for (i, &norm) in norms.iter().enumerate() {
                            let xr = input.row(i);
                            let gr = &g[i * n..(i + 1) * n];
                            let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let k = dot / (norm * norm * norm);
                            gx.extend(xr.iter().zip(gr).map(|(xv, gv)| gv / norm - xv * k));
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Sum(x) => {
                    if self.nodes[x.0].tracked {
                        accumulate(&mut grads, *x, vec![g[0]; self.value(*x).len()]);
                    }
                }
                Op::SumSquares(x) => {
                    if self.nodes[x.0].tracked {
                        let gx = self.value(*x).data.iter().map(|v| 2.0 * v * g[0]).collect();
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if self.nodes[logits.0].tracked {
                        let m = labels.len();
                        let c = probs.len() / m;
                        let scale = g[0] / m as f64;
                        let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                        for (i, &l) in labels.iter().enumerate() {
                            gz[i * c + l] -= scale;
                        }
                        accumulate(&mut grads, *logits, gz);
                    }
                }
            }
            // Parameter gradients are kept; intermediates are consumed above.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Param, Some(g)) => Some(Tensor::from_raw(node.value.shape.clone(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zero when the node does not reach the
    /// loss or is not a parameter.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Borrowing variant of [`Gradients::wrt`]; `None` means zero.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the objective value together with its autodiff gradient.
/// The result is `max_i |g_i - g_fd,i| / max(1, |g_fd,i|)`.
pub fn finite_diff_check<F>(f: F, theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("step h must be positive, got {h}")));
    }
    let (value, grad) = f(theta)?;
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f(theta) = {value}")));
    }
    if grad.len() != theta.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            left: vec![theta.len()],
            right: vec![grad.len()],
        });
    }
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let (plus, _) = f(&probe)?;
        probe[i] = theta[i] - h;
        let (minus, _) = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective while probing coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * h);
        let err = (grad[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn zero_annihilates() {
        let m = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let z = matmul(&Tensor::zeros(&[2, 3]), &m).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::new(vec![4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        assert_eq!(relu(&neg), Tensor::zeros(&[4]));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_matrix(&mut rng, 4, 5);
        for (o, i) in relu(&r).data().iter().zip(r.data()) {
            assert_eq!(*o, i.max(0.0));
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 4.0, 0.0]).unwrap());
        let loss = tape.sum(theta);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta), Tensor::filled(&[5], 1.0));
    }

    #[test]
    fn half_square_norm_gradient_is_theta() {
        let values = vec![0.3, -1.0, 2.0];
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::new(vec![3], values.clone()).unwrap());
        let sq = tape.sum_squares(theta).unwrap();
        let loss = tape.scale(sq, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), values.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_and_constant_nodes_get_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::filled(&[1, 2], 1.0));
        let unused = tape.param(Tensor::filled(&[2, 2], 3.0));
        let c = tape.constant(Tensor::filled(&[2, 1], 2.0));
        let y = tape.matmul(a, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
        assert_eq!(g.wrt(c), Tensor::zeros(&[2, 1]));
        assert_eq!(g.wrt(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let quad = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((t.iter().map(|v| v * v).sum(), t.iter().map(|v| 2.0 * v).collect()))
        };
        let err = finite_diff_check(quad, &[0.5, -3.0, 7.0], 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");

        let constant = |t: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((4.0, vec![0.0; t.len()])) };
        assert_eq!(finite_diff_check(constant, &[1.0, 2.0], 1e-5).unwrap(), 0.0);

        assert!(finite_diff_check(quad, &[1.0], 0.0).is_err());
        let nan = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(
            finite_diff_check(nan, &[1.0], 1e-5),
            Err(Error::Evaluation(_))
        ));
    }

    /// Two-layer MLP with cross-entropy, all weights as parameters.
    fn mlp_loss(theta: &[f64], x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (d_in, h, c) = (x.cols(), 5, 3);
        let (w1, rest) = theta.split_at(d_in * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * c);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let w1 = tape.param(Tensor::matrix(d_in, h, w1.to_vec())?);
        let b1 = tape.param(Tensor::matrix(1, h, b1.to_vec())?);
        let w2 = tape.param(Tensor::matrix(h, c, w2.to_vec())?);
        let b2 = tape.param(Tensor::matrix(1, c, b2.to_vec())?);
        let z1 = tape.matmul(xi, w1)?;
        let z1 = tape.add_row(z1, b1)?;
        let a1 = tape.relu(z1);
        let z2 = tape.matmul(a1, w2)?;
        let z2 = tape.add_row(z2, b2)?;
        let loss = tape.cross_entropy(z2, labels)?;
        let g = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(theta.len());
        for id in [w1, b1, w2, b2] {
            flat.extend_from_slice(g.wrt(id).data());
        }
        Ok((tape.value(loss).data()[0], flat))
    }

    #[test]
    fn mlp_cross_entropy_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 6, 4);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let n = 4 * 5 + 5 + 5 * 3 + 3;
            let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = finite_diff_check(|t| mlp_loss(t, &x, &labels), &theta, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    /// Cosine logits `s * normalize(x W1) * normalize(W2^T)^T` with cross-entropy.
    fn cosine_loss(theta: &[f64], x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (d_in, h, c) = (x.cols(), 5, 3);
        let (w1, w2) = theta.split_at(d_in * h);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let w1 = tape.param(Tensor::matrix(d_in, h, w1.to_vec())?);
        let w2 = tape.param(Tensor::matrix(h, c, w2.to_vec())?);
        let f = tape.matmul(xi, w1)?;
        let f = tape.normalize_rows(f)?;
        let wt = tape.transpose(w2)?;
        let wt = tape.normalize_rows(wt)?;
        let w = tape.transpose(wt)?;
        let z = tape.matmul(f, w)?;
        let z = tape.scale(z, 4.0)?;
        let loss = tape.cross_entropy(z, labels)?;
        let g = tape.backward(loss)?;
        let mut flat = g.wrt(w1).into_data();
        flat.extend(g.wrt(w2).into_data());
        Ok((tape.value(loss).data()[0], flat))
    }

    #[test]
    fn cosine_logits_match_finite_differences() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 6, 4);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let theta: Vec<f64> = (0..4 * 5 + 5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = finite_diff_check(|t| cosine_loss(t, &x, &labels), &theta, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn transpose_and_normalize_values() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = transpose(&a).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = tape.normalize_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 6, 4);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let theta: Vec<f64> = (0..43).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g1) = mlp_loss(&theta, &x, &labels).unwrap();
        let (_, g2) = mlp_loss(&theta, &x, &labels).unwrap();
        let b1: Vec<u64> = g1.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = g2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    proptest::proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let c = random_matrix(&mut rng, n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            for (l, r) in left.data().iter().zip(right.data()) {
                proptest::prop_assert!((l - r).abs() <= 1e-10 * scale);
            }
        }
    }
}
