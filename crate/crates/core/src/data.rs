//! Labeled sample sets.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Class identifier shared across the whole stream.
pub type ClassId = u32;

/// Row-major inputs with one global class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
    labels: Vec<ClassId>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<ClassId>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self {
            dim: inputs.cols(),
            values: inputs.into_data(),
            labels,
        })
    }

    /// A dataset with no samples.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            values: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// All samples as one matrix.
    pub fn inputs(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.values.clone())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.labels.iter().copied().collect()
    }

    /// Copies the listed rows into a batch matrix.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<ClassId>)> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), d, data)?, labels))
    }

    /// Rows whose label is `class`.
    pub fn rows_of(&self, class: ClassId) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Reorders samples; used by the permutation-invariance checks.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let (inputs, labels) = self.gather(order)?;
        Self::new(inputs, labels)
    }
}

/// Maps global class ids onto dense head indices `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelIndex {
    classes: Vec<ClassId>,
}

impl LabelIndex {
    pub fn new(classes: impl IntoIterator<Item = ClassId>) -> Self {
        let set: BTreeSet<ClassId> = classes.into_iter().collect();
        Self {
            classes: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: ClassId) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::contract(format!("class {class} not in label index")))
    }

    pub fn map(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels.iter().map(|&c| self.index_of(c)).collect()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }
}
