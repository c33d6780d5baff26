use std::collections::VecDeque;

use super::{LossError, Origin, UNIT_NORM_TOL};
use crate::numerics::{Matrix, NumericsError, Real};

/// FIFO cache of momentum embeddings and their verb labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryQueue {
    capacity: usize,
    rows: VecDeque<(Vec<f64>, usize)>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.rows.iter().map(|(z, v)| (z.as_slice(), *v))
    }

    /// Appends every non-guide row, evicting the oldest entries beyond
    /// capacity. Guide rows are never cached. Returns how many rows were
    /// accepted; nothing is inserted if any candidate is not unit-norm.
    pub fn update(
        &mut self,
        z: &Matrix,
        verbs: &[usize],
        origins: &[Origin],
    ) -> Result<usize, LossError> {
        if z.nrows() != verbs.len() || z.nrows() != origins.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{} rows, {} labels, {} origins",
                z.nrows(),
                verbs.len(),
                origins.len()
            )));
        }
        let keep: Vec<usize> = (0..z.nrows())
            .filter(|&r| !matches!(origins[r], Origin::Guide { .. }))
            .collect();
        for &r in &keep {
            let row = z.row(r);
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(LossError::NonUnitNorm { row: r, norm });
            }
        }
        if self.capacity == 0 {
            return Ok(0);
        }
        for &r in &keep {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back((z.row(r).to_vec(), verbs[r]));
        }
        Ok(keep.len())
    }
}

/// Exponential moving average `slow ← m·slow + (1 − m)·fast`.
pub fn momentum_update<F: Real>(slow: &mut [F], fast: &[F], m: F) -> Result<(), NumericsError> {
    if slow.len() != fast.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: slow.len(),
            got: fast.len(),
        });
    }
    assert!(
        m >= F::zero() && m <= F::one(),
        "momentum must lie in [0, 1]"
    );
    let rest = F::one() - m;
    for (s, &f) in slow.iter_mut().zip(fast) {
        *s = m * *s + rest * f;
    }
    Ok(())
}
