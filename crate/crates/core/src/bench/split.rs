use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotationTable, BenchError};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Objects already seen by pretraining corpora; always kept base.
    pub overlap: Vec<String>,
    /// Objects with fewer instances than this are forced novel.
    pub k: usize,
    pub train_ratio: f64,
    pub tolerance: f64,
    pub max_attempts: u32,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            overlap: Vec::new(),
            k: 10,
            train_ratio: 0.8,
            tolerance: 0.02,
            max_attempts: 100,
            seed: 0,
        }
    }
}

/// Why an object landed on its side of the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Overlap,
    /// On the overlap list but below the frequency threshold; kept base.
    OverlapBelowThreshold,
    Frequency,
    Random,
    /// Fixed by the generator of a synthetic dataset.
    Designated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub attempt: u32,
    pub base_objects: Vec<String>,
    pub novel_objects: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl SplitSpec {
    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Serialize(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Serialize(e.to_string()))
    }

    pub fn train_fraction(&self) -> f64 {
        self.train.len() as f64 / (self.train.len() + self.test.len()).max(1) as f64
    }

    pub fn is_novel(&self, object: &str) -> bool {
        self.novel_objects.iter().any(|o| o == object)
    }

    /// Checks disjointness, exhaustiveness, verb coverage and that
    /// novel-object segments appear only in test. Returns the first
    /// violation.
    pub fn check(&self, table: &AnnotationTable) -> Result<(), String> {
        let base: BTreeSet<&str> = self.base_objects.iter().map(String::as_str).collect();
        let novel: BTreeSet<&str> = self.novel_objects.iter().map(String::as_str).collect();
        if let Some(o) = base.intersection(&novel).next() {
            return Err(format!("object {o} is both base and novel"));
        }
        if let Some(o) = table
            .objects()
            .iter()
            .find(|o| !base.contains(o.as_str()) && !novel.contains(o.as_str()))
        {
            return Err(format!("object {o} is unassigned"));
        }
        let train: BTreeSet<&str> = self.train.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = self.test.iter().map(String::as_str).collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err("duplicate segment ids".into());
        }
        if let Some(s) = train.intersection(&test).next() {
            return Err(format!("segment {s} is in train and test"));
        }
        if train.len() + test.len() != table.len() {
            return Err("train and test do not cover the table".into());
        }
        let mut train_verbs = BTreeSet::new();
        for row in table.rows() {
            let in_train = train.contains(row.segment_id.as_str());
            if !in_train && !test.contains(row.segment_id.as_str()) {
                return Err(format!("segment {} is unassigned", row.segment_id));
            }
            if in_train {
                if novel.contains(row.object.as_str()) {
                    return Err(format!("novel segment {} is in train", row.segment_id));
                }
                train_verbs.insert(row.verb.as_str());
            }
        }
        if let Some(v) = table
            .verbs()
            .iter()
            .find(|v| !train_verbs.contains(v.as_str()))
        {
            return Err(format!("verb {v} never appears in train"));
        }
        Ok(())
    }
}

/// Builds an open-vocabulary split: overlap objects stay base, rare objects
/// go novel, the remaining objects are shuffled into novel while the novel
/// segment count fits the test budget, and random base segments are held
/// out to reach the train ratio.
pub fn build_ov_split(table: &AnnotationTable, cfg: &SplitConfig) -> Result<SplitSpec, BenchError> {
    if table.is_empty() {
        return Err(BenchError::SpecInvalid(
            "cannot split an empty table".into(),
        ));
    }
    if !(cfg.train_ratio > 0.0 && cfg.train_ratio < 1.0) || cfg.k == 0 || !(cfg.tolerance >= 0.0) {
        return Err(BenchError::SpecInvalid(format!(
            "need 0 < train_ratio < 1 and k >= 1 (ratio {}, k {})",
            cfg.train_ratio, cfg.k
        )));
    }
    let n_obj = table.objects().len();
    let n_verb = table.verbs().len();
    let mut count = vec![0usize; n_obj];
    let mut verb_rows = vec![vec![0usize; n_verb]; n_obj];
    for r in 0..table.len() {
        count[table.object_id(r)] += 1;
        verb_rows[table.object_id(r)][table.verb_id(r)] += 1;
    }
    let overlap: BTreeSet<&str> = cfg.overlap.iter().map(String::as_str).collect();
    let mut forced: Vec<Option<(bool, Provenance)>> = vec![None; n_obj];
    for (o, name) in table.objects().iter().enumerate() {
        forced[o] = if overlap.contains(name.as_str()) {
            Some((
                false,
                if count[o] < cfg.k {
                    Provenance::OverlapBelowThreshold
                } else {
                    Provenance::Overlap
                },
            ))
        } else if count[o] < cfg.k {
            Some((true, Provenance::Frequency))
        } else {
            None
        };
    }

    // verbs left on base-side objects after the forced rules
    let mut base_verbs = vec![0usize; n_verb];
    for o in 0..n_obj {
        if !matches!(forced[o], Some((true, _))) {
            for (v, c) in verb_rows[o].iter().enumerate() {
                base_verbs[v] += c;
            }
        }
    }
    if let Some(v) = base_verbs.iter().position(|&c| c == 0) {
        return Err(BenchError::InfeasibleSplit(format!(
            "verb {} only occurs on forced-novel objects",
            table.verbs()[v]
        )));
    }
    let total = table.len();
    let budget = ((1.0 - cfg.train_ratio) * total as f64).round() as usize;
    let forced_novel: usize = (0..n_obj)
        .filter(|&o| matches!(forced[o], Some((true, _))))
        .map(|o| count[o])
        .sum();
    let max_test = (1.0 - cfg.train_ratio + cfg.tolerance) * total as f64;
    if forced_novel as f64 > max_test {
        return Err(BenchError::InfeasibleSplit(format!(
            "{forced_novel} of {total} segments are forced novel, more than the test share allows"
        )));
    }

    let rng_root = SeededRng::new(cfg.seed, 0x5350_4c54);
    for attempt in 0..cfg.max_attempts.max(1) {
        let mut rng = rng_root.derive(&[u64::from(attempt)]);
        let mut novel = vec![false; n_obj];
        let mut prov: Vec<Provenance> = vec![Provenance::Random; n_obj];
        for o in 0..n_obj {
            if let Some((is_novel, p)) = forced[o] {
                novel[o] = is_novel;
                prov[o] = p;
            }
        }
        let mut free: Vec<usize> = (0..n_obj).filter(|&o| forced[o].is_none()).collect();
        free.shuffle(&mut rng);
        let mut novel_segments = forced_novel;
        let mut verbs_left = base_verbs.clone();
        for o in free {
            let keeps_verbs = verb_rows[o]
                .iter()
                .zip(&verbs_left)
                .all(|(&c, &left)| c == 0 || left > c);
            if novel_segments + count[o] <= budget && keeps_verbs {
                novel[o] = true;
                novel_segments += count[o];
                for (left, c) in verbs_left.iter_mut().zip(&verb_rows[o]) {
                    *left -= c;
                }
            }
        }

        // hold out base segments, never a verb's last training instance
        let mut train_verbs = verbs_left.clone();
        let mut base_rows: Vec<usize> =
            (0..total).filter(|&r| !novel[table.object_id(r)]).collect();
        base_rows.shuffle(&mut rng);
        let want = budget
            .saturating_sub(novel_segments)
            .max(usize::from(base_rows.len() > 1));
        let mut held = vec![false; total];
        let mut n_held = 0;
        for r in base_rows {
            if n_held == want {
                break;
            }
            let v = table.verb_id(r);
            if train_verbs[v] > 1 {
                train_verbs[v] -= 1;
                held[r] = true;
                n_held += 1;
            }
        }

        let mut spec = SplitSpec {
            seed: cfg.seed,
            attempt,
            base_objects: Vec::new(),
            novel_objects: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
            provenance: BTreeMap::new(),
        };
        for (o, name) in table.objects().iter().enumerate() {
            if novel[o] {
                spec.novel_objects.push(name.clone());
            } else {
                spec.base_objects.push(name.clone());
            }
            spec.provenance.insert(name.clone(), prov[o]);
        }
        for (r, row) in table.rows().iter().enumerate() {
            if novel[table.object_id(r)] || held[r] {
                spec.test.push(row.segment_id.clone());
            } else {
                spec.train.push(row.segment_id.clone());
            }
        }
        if (spec.train_fraction() - cfg.train_ratio).abs() <= cfg.tolerance
            && spec.check(table).is_ok()
        {
            return Ok(spec);
        }
    }
    Err(BenchError::InfeasibleSplit(format!(
        "no split within {} of ratio {} with full verb coverage after {} attempts",
        cfg.tolerance, cfg.train_ratio, cfg.max_attempts
    )))
}
