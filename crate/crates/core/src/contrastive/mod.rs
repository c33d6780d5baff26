//! Supervised contrastive objectives for object-agnostic pretraining.
//!
//! [`loss_out`] is the supervised contrastive loss with the positive average
//! outside the log; [`loss_in`] moves the average over the guiding bag inside
//! the log, which re-weights each guide by its share of the bag's softmax.
//! Both return the value averaged over scored anchors, the full gradient with
//! respect to every embedding row, and the closed-form per-anchor gradient
//! `∂Lᵢ/∂zᵢ`.

mod batch;
mod gradcheck;
mod loss;
pub mod oracle;
mod queue;

use thiserror::Error;

pub use batch::{build_positive_bags, EmbeddingBatch, Origin, PositiveBags};
pub use gradcheck::{gradient_conformance, GradcheckReport};
pub use loss::{
    loss_in, loss_in_mil_nce, loss_out, total_loss, AnchorDiagnostics, DenominatorPolicy,
    LossConfig, LossDiagnostics, LossOutput,
};
pub use queue::{momentum_update, MemoryQueue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no anchor has an in-class positive ({skipped} anchors skipped)")]
    EmptyPositiveBag { skipped: usize },
    #[error("no anchor has a guiding augmentation ({skipped} anchors skipped)")]
    EmptyGuideBag { skipped: usize },
    #[error("row {row} has norm {norm}, expected unit norm")]
    NonUnitNorm { row: usize, norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("guide row {row} names anchor {anchor}, which is not a view row")]
    InvalidGuideOwner { row: usize, anchor: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Tolerance on `‖z‖ − 1` for every embedding entering a loss or the queue.
pub const UNIT_NORM_TOL: f64 = 1e-6;
