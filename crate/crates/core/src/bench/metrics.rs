use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{AnnotationTable, BenchError, SplitSpec};

/// Harmonic mean of two percentages, 0 when both are 0.
pub fn hm(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Top-1 percentages on closed (base-object) and novel-object test segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub closed: f64,
    pub novel: f64,
    pub hm: f64,
}

impl AxisReport {
    fn new(closed: f64, novel: f64) -> Self {
        Self {
            closed,
            novel,
            hm: hm(closed, novel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub segments: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub closed_segments: usize,
    pub novel_segments: usize,
    pub verb: AxisReport,
    pub object: AxisReport,
    pub action: AxisReport,
    pub per_verb: BTreeMap<String, ClassAccuracy>,
    pub per_object: BTreeMap<String, ClassAccuracy>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Serialize(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Serialize(e.to_string()))
    }
}

fn pct(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Top-1 verb, object and action accuracy over the split's test segments.
/// Predictions are table label ids keyed by segment id; an action is
/// correct iff both its verb and its object are.
pub fn evaluate(
    verb_pred: &BTreeMap<String, usize>,
    object_pred: &BTreeMap<String, usize>,
    table: &AnnotationTable,
    split: &SplitSpec,
) -> Result<MetricsReport, BenchError> {
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    // [closed, novel] × [verb, object, action] correct counts
    let mut correct = [[0usize; 3]; 2];
    let mut seen = [0usize; 2];
    let mut per_verb: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_object: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, row) in table.rows().iter().enumerate() {
        if !test.contains(row.segment_id.as_str()) {
            continue;
        }
        let missing = || BenchError::MissingPrediction(row.segment_id.clone());
        let v_ok = *verb_pred.get(&row.segment_id).ok_or_else(missing)? == table.verb_id(r);
        let o_ok = *object_pred.get(&row.segment_id).ok_or_else(missing)? == table.object_id(r);
        let side = usize::from(split.is_novel(&row.object));
        seen[side] += 1;
        correct[side][0] += usize::from(v_ok);
        correct[side][1] += usize::from(o_ok);
        correct[side][2] += usize::from(v_ok && o_ok);
        let e = per_verb.entry(row.verb.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(v_ok);
        let e = per_object.entry(row.object.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(o_ok);
    }
    let axis = |k: usize| AxisReport::new(pct(correct[0][k], seen[0]), pct(correct[1][k], seen[1]));
    let classes = |m: BTreeMap<String, (usize, usize)>| {
        m.into_iter()
            .map(|(k, (n, c))| {
                (
                    k,
                    ClassAccuracy {
                        segments: n,
                        top1: pct(c, n),
                    },
                )
            })
            .collect()
    };
    Ok(MetricsReport {
        closed_segments: seen[0],
        novel_segments: seen[1],
        verb: axis(0),
        object: axis(1),
        action: axis(2),
        per_verb: classes(per_verb),
        per_object: classes(per_object),
    })
}
