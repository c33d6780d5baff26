//! Benchmark plumbing: annotation tables, open-vocabulary splits, the
//! synthetic compositional dataset, Top-1/HM metrics and the end-to-end
//! experiment runner.

mod annotations;
mod experiment;
mod metrics;
mod split;
mod synth;

use thiserror::Error;

pub use annotations::{
    load_annotations, write_annotations, AnnotationRow, AnnotationTable, BoxKind, CropBox,
    LabelVocab,
};
pub use experiment::*;
pub use metrics::{evaluate, hm, AxisReport, ClassAccuracy, MetricsReport};
pub use split::{build_ov_split, Provenance, SplitConfig, SplitSpec};
pub use synth::{
    gen_synthetic_dataset, partition, read_clips, render_composition, write_clips, Appearance,
    Placement, SynthDataset, SynthSpec, Verb, VERB_NAMES,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: duplicate segment id {id}")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: unknown label {label}")]
    UnknownLabel { row: usize, label: String },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("invalid spec: {0}")]
    SpecInvalid(String),
    #[error("missing prediction for segment {0}")]
    MissingPrediction(String),
    #[error("serialization: {0}")]
    Serialize(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
