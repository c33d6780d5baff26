use serde::{Deserialize, Serialize};

use super::{LossError, MemoryQueue, UNIT_NORM_TOL};
use crate::numerics::Matrix;

/// Where an embedding row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// A photometric view embedded by the online encoder; the only rows
    /// scored as anchors.
    View,
    /// A guiding augmentation owned by the view row `anchor`.
    Guide { anchor: usize },
    /// A cached momentum embedding from the memory queue.
    Queue,
}

/// Unit-norm embeddings with verb labels and origin tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Matrix,
    verbs: Vec<usize>,
    origins: Vec<Origin>,
}

impl EmbeddingBatch {
    pub fn new(z: Matrix, verbs: Vec<usize>, origins: Vec<Origin>) -> Result<Self, LossError> {
        if z.nrows() != verbs.len() || z.nrows() != origins.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{} rows, {} labels, {} origins",
                z.nrows(),
                verbs.len(),
                origins.len()
            )));
        }
        if z.nrows() < 2 {
            return Err(LossError::ShapeMismatch(format!(
                "need at least 2 rows, got {}",
                z.nrows()
            )));
        }
        for (row, r) in z.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(LossError::NonUnitNorm { row, norm });
            }
        }
        for (row, o) in origins.iter().enumerate() {
            if let Origin::Guide { anchor } = *o {
                if origins.get(anchor) != Some(&Origin::View) {
                    return Err(LossError::InvalidGuideOwner { row, anchor });
                }
            }
        }
        Ok(Self { z, verbs, origins })
    }

    /// Batch of view rows only.
    pub fn views(z: Matrix, verbs: Vec<usize>) -> Result<Self, LossError> {
        let origins = vec![Origin::View; verbs.len()];
        Self::new(z, verbs, origins)
    }

    /// Appends the queue's cached rows, tagged [`Origin::Queue`].
    pub fn with_queue(self, queue: &MemoryQueue) -> Result<Self, LossError> {
        if queue.is_empty() {
            return Ok(self);
        }
        let d = self.dim();
        let extra = queue.len();
        let mut z = Matrix::zeros((self.len() + extra, d));
        z.slice_mut(ndarray::s![..self.len(), ..]).assign(&self.z);
        let mut verbs = self.verbs;
        let mut origins = self.origins;
        for (row, verb) in queue.iter() {
            if row.len() != d {
                return Err(LossError::ShapeMismatch(format!(
                    "queue dim {} vs batch dim {d}",
                    row.len()
                )));
            }
            let r = verbs.len();
            z.row_mut(r).assign(&ndarray::ArrayView1::from(row));
            verbs.push(verb);
            origins.push(Origin::Queue);
        }
        Self::new(z, verbs, origins)
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn verbs(&self) -> &[usize] {
        &self.verbs
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn view_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.origins
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Origin::View)
            .map(|(i, _)| i)
    }
}

/// Per-row positive sets; rows that are not views have empty bags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositiveBags {
    /// In-class positives `Pᵢ`: same-verb view and queue rows other than `i`.
    pub positives: Vec<Vec<usize>>,
    /// Guiding augmentations `Gᵢ` owned by anchor `i`.
    pub guides: Vec<Vec<usize>>,
}

/// In-class positives come from views and queue rows; guides only from the
/// rows tagged as owned by the anchor. Guides never act as in-class positives.
pub fn build_positive_bags(batch: &EmbeddingBatch) -> PositiveBags {
    let n = batch.len();
    let mut positives = vec![Vec::new(); n];
    let mut guides = vec![Vec::new(); n];
    for (g, o) in batch.origins.iter().enumerate() {
        if let Origin::Guide { anchor } = *o {
            guides[anchor].push(g);
        }
    }
    for i in batch.view_rows() {
        positives[i] = (0..n)
            .filter(|&j| {
                j != i
                    && batch.verbs[j] == batch.verbs[i]
                    && matches!(batch.origins[j], Origin::View | Origin::Queue)
            })
            .collect();
    }
    PositiveBags { positives, guides }
}
