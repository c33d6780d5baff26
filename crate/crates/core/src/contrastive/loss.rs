use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, LossError, Origin, PositiveBags};
use crate::numerics::{log_sum_exp, softmax, Matrix};

/// Whether guide rows join the denominator of the in-log loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenominatorPolicy {
    IncludeGuides,
    ExcludeGuides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_out: f64,
    pub tau_in: f64,
    pub lambda: f64,
    pub policy: DenominatorPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_out: 0.07,
            tau_in: 0.1,
            lambda: 1.0,
            policy: DenominatorPolicy::IncludeGuides,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau_out > 0.0) || !(self.tau_in > 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "temperatures must be positive (tau_out={}, tau_in={})",
                self.tau_out, self.tau_in
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDiagnostics {
    pub anchor: usize,
    pub loss: f64,
    /// Likelihood `P_ik` of every denominator row.
    pub likelihoods: Vec<(usize, f64)>,
    /// Coefficient of each positive in the closed-form anchor gradient:
    /// `P_ip − 1/|Pᵢ|` for the outer loss, `P_ip − w_ip` for the inner loss.
    pub positive_weights: Vec<(usize, f64)>,
    /// Softmax share `w_ip` of each guide within its own bag (inner loss only).
    pub bag_weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossDiagnostics {
    pub anchors: Vec<AnchorDiagnostics>,
    /// View rows left out of the mean because their bag was empty.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean of the per-anchor losses.
    pub value: f64,
    /// Gradient of `value` with respect to every row of the batch.
    pub grad: Matrix,
    /// Row `i` holds `∂Lᵢ/∂zᵢ` for each scored anchor, zero elsewhere.
    pub anchor_grad: Matrix,
    pub diagnostics: LossDiagnostics,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Out,
    In { mean_in_log: bool },
}

fn in_denominator(origin: Origin, kind: Kind, policy: DenominatorPolicy) -> bool {
    match origin {
        Origin::View | Origin::Queue => true,
        Origin::Guide { .. } => {
            matches!(kind, Kind::In { .. }) && policy == DenominatorPolicy::IncludeGuides
        }
    }
}

fn evaluate(
    batch: &EmbeddingBatch,
    bags: &PositiveBags,
    cfg: &LossConfig,
    kind: Kind,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let n = batch.len();
    if bags.positives.len() != n || bags.guides.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "bags cover {} rows, batch has {n}",
            bags.positives.len()
        )));
    }
    let tau = match kind {
        Kind::Out => cfg.tau_out,
        Kind::In { .. } => cfg.tau_in,
    };
    let z = batch.z();
    let d = batch.dim();
    let origins = batch.origins();
    let mut grad = Matrix::zeros((n, d));
    let mut anchor_grad = Matrix::zeros((n, d));
    let mut diagnostics = LossDiagnostics::default();
    let mut total = 0.0;

    for i in batch.view_rows() {
        let bag = match kind {
            Kind::Out => &bags.positives[i],
            Kind::In { .. } => &bags.guides[i],
        };
        if bag.is_empty() {
            diagnostics.skipped.push(i);
            continue;
        }
        let zi = z.row(i);
        let denom: Vec<usize> = (0..n)
            .filter(|&k| k != i && in_denominator(origins[k], kind, cfg.policy))
            .collect();
        let logits: Vec<f64> = denom.iter().map(|&k| zi.dot(&z.row(k)) / tau).collect();
        let lse = log_sum_exp(&logits).map_err(|_| {
            LossError::ShapeMismatch(format!("anchor {i} has an empty denominator"))
        })?;
        let likelihoods: Vec<(usize, f64)> = denom
            .iter()
            .zip(&logits)
            .map(|(&k, &s)| (k, (s - lse).exp()))
            .collect();

        let bag_logits: Vec<f64> = bag.iter().map(|&p| zi.dot(&z.row(p)) / tau).collect();
        // weight each bag member carries in the numerator's gradient
        let (loss, numer_weights): (f64, Vec<f64>) = match kind {
            Kind::Out => {
                let inv = 1.0 / bag.len() as f64;
                let mean_logit = bag_logits.iter().sum::<f64>() * inv;
                (lse - mean_logit, vec![inv; bag.len()])
            }
            Kind::In { mean_in_log } => {
                let lse_bag = log_sum_exp(&bag_logits).expect("bag is non-empty");
                let offset = if mean_in_log {
                    (bag.len() as f64).ln()
                } else {
                    0.0
                };
                (lse - lse_bag + offset, softmax(&bag_logits))
            }
        };
        total += loss;

        let mut ga = anchor_grad.row_mut(i);
        for &(k, p) in &likelihoods {
            ga.scaled_add(p / tau, &z.row(k));
        }
        for (&p, &w) in bag.iter().zip(&numer_weights) {
            ga.scaled_add(-w / tau, &z.row(p));
        }

        // contributions to the rows the anchor touches through a dot product
        for &(k, p) in &likelihoods {
            grad.row_mut(k).scaled_add(p / tau, &zi);
        }
        for (&p, &w) in bag.iter().zip(&numer_weights) {
            grad.row_mut(p).scaled_add(-w / tau, &zi);
        }

        let positive_weights = bag
            .iter()
            .zip(&numer_weights)
            .map(|(&p, &w)| (p, lookup_p(&likelihoods, p) - w))
            .collect();
        let bag_weights = match kind {
            Kind::Out => Vec::new(),
            Kind::In { .. } => bag
                .iter()
                .copied()
                .zip(numer_weights.iter().copied())
                .collect(),
        };
        diagnostics.anchors.push(AnchorDiagnostics {
            anchor: i,
            loss,
            likelihoods,
            positive_weights,
            bag_weights,
        });
    }

    let scored = diagnostics.anchors.len();
    if scored == 0 {
        let skipped = diagnostics.skipped.len();
        return Err(match kind {
            Kind::Out => LossError::EmptyPositiveBag { skipped },
            Kind::In { .. } => LossError::EmptyGuideBag { skipped },
        });
    }
    let scale = 1.0 / scored as f64;
    grad += &anchor_grad;
    grad *= scale;

    Ok(LossOutput {
        value: total * scale,
        grad,
        anchor_grad,
        diagnostics,
    })
}

fn lookup_p(likelihoods: &[(usize, f64)], k: usize) -> f64 {
    likelihoods
        .iter()
        .find(|(j, _)| *j == k)
        .map_or(0.0, |&(_, p)| p)
}

/// Supervised contrastive loss over in-class positives, averaged over
/// anchors that have at least one positive.
pub fn loss_out(
    batch: &EmbeddingBatch,
    bags: &PositiveBags,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    evaluate(batch, bags, cfg, Kind::Out)
}

/// Guiding-bag loss with the bag average inside the log.
pub fn loss_in(
    batch: &EmbeddingBatch,
    bags: &PositiveBags,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    evaluate(batch, bags, cfg, Kind::In { mean_in_log: true })
}

/// [`loss_in`] without the `1/|Gᵢ|` factor (the MIL-NCE form). Differs from
/// [`loss_in`] by the constant `log |Gᵢ|` per anchor; gradients coincide.
pub fn loss_in_mil_nce(
    batch: &EmbeddingBatch,
    bags: &PositiveBags,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    evaluate(batch, bags, cfg, Kind::In { mean_in_log: false })
}

/// `L_out + λ L_in`. The inner loss is not evaluated when `λ = 0`.
pub fn total_loss(
    batch: &EmbeddingBatch,
    bags: &PositiveBags,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    let mut out = loss_out(batch, bags, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(out);
    }
    let inner = loss_in(batch, bags, cfg)?;
    out.value += cfg.lambda * inner.value;
    out.grad.scaled_add(cfg.lambda, &inner.grad);
    out.anchor_grad.scaled_add(cfg.lambda, &inner.anchor_grad);
    Ok(out)
}
