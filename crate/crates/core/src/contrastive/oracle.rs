//! Reference transcriptions of the per-anchor losses, written with plain
//! exponent sums over index sets. Used only as the finite-difference target.

use rand::Rng;

use super::{DenominatorPolicy, EmbeddingBatch, Origin};
use crate::numerics::{Matrix, SeededRng};

pub struct RawBatch {
    pub z: Vec<Vec<f64>>,
    pub verbs: Vec<usize>,
    pub origins: Vec<Origin>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RawBatch {
    pub fn to_batch(&self) -> EmbeddingBatch {
        let d = self.z[0].len();
        let m = Matrix::from_shape_fn((self.z.len(), d), |(i, j)| self.z[i][j]);
        EmbeddingBatch::new(m, self.verbs.clone(), self.origins.clone()).unwrap()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.z.iter().flatten().copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> RawBatch {
        let d = self.z[0].len();
        RawBatch {
            z: flat.chunks(d).map(|c| c.to_vec()).collect(),
            verbs: self.verbs.clone(),
            origins: self.origins.clone(),
        }
    }

    fn is_view(&self, k: usize) -> bool {
        self.origins[k] == Origin::View
    }

    fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.z.len())
            .filter(|&j| {
                j != i
                    && self.verbs[j] == self.verbs[i]
                    && !matches!(self.origins[j], Origin::Guide { .. })
            })
            .collect()
    }

    fn guides(&self, i: usize) -> Vec<usize> {
        (0..self.z.len())
            .filter(|&j| self.origins[j] == Origin::Guide { anchor: i })
            .collect()
    }

    pub fn out_anchor(&self, i: usize, tau: f64) -> Option<f64> {
        let pos = self.positives(i);
        if pos.is_empty() {
            return None;
        }
        let denom: f64 = (0..self.z.len())
            .filter(|&k| k != i && !matches!(self.origins[k], Origin::Guide { .. }))
            .map(|k| (dot(&self.z[i], &self.z[k]) / tau).exp())
            .sum();
        let sum: f64 = pos
            .iter()
            .map(|&p| ((dot(&self.z[i], &self.z[p]) / tau).exp() / denom).ln())
            .sum();
        Some(-sum / pos.len() as f64)
    }

    pub fn in_anchor(
        &self,
        i: usize,
        tau: f64,
        policy: DenominatorPolicy,
        mean_in_log: bool,
    ) -> Option<f64> {
        let g = self.guides(i);
        if g.is_empty() {
            return None;
        }
        let denom: f64 = (0..self.z.len())
            .filter(|&k| {
                k != i
                    && match self.origins[k] {
                        Origin::Guide { .. } => policy == DenominatorPolicy::IncludeGuides,
                        _ => true,
                    }
            })
            .map(|k| (dot(&self.z[i], &self.z[k]) / tau).exp())
            .sum();
        let mut numer: f64 = g
            .iter()
            .map(|&p| (dot(&self.z[i], &self.z[p]) / tau).exp())
            .sum();
        if mean_in_log {
            numer /= g.len() as f64;
        }
        Some(-(numer / denom).ln())
    }

    fn mean(&self, f: impl Fn(usize) -> Option<f64>) -> f64 {
        let vals: Vec<f64> = (0..self.z.len())
            .filter(|&i| self.is_view(i))
            .filter_map(f)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn out_mean(&self, tau: f64) -> f64 {
        self.mean(|i| self.out_anchor(i, tau))
    }

    pub fn in_mean(&self, tau: f64, policy: DenominatorPolicy) -> f64 {
        self.mean(|i| self.in_anchor(i, tau, policy, true))
    }
}

/// `views` unit view rows with verbs drawn from `num_verbs` classes, plus
/// `guides_per_view` guide rows per view.
pub fn random_batch(
    seed: u64,
    views: usize,
    dim: usize,
    num_verbs: usize,
    guides_per_view: usize,
) -> RawBatch {
    let mut rng = SeededRng::new(seed, 1234);
    let unit = |rng: &mut SeededRng| {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut z = Vec::new();
    let mut verbs = Vec::new();
    let mut origins = Vec::new();
    for _ in 0..views {
        z.push(unit(&mut rng));
        verbs.push(rng.gen_range(0..num_verbs));
        origins.push(Origin::View);
    }
    for a in 0..views {
        for _ in 0..guides_per_view {
            z.push(unit(&mut rng));
            verbs.push(verbs[a]);
            origins.push(Origin::Guide { anchor: a });
        }
    }
    RawBatch { z, verbs, origins }
}
