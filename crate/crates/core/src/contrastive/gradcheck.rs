use super::oracle::{random_batch, RawBatch};
use super::{
    build_positive_bags, loss_in, loss_out, DenominatorPolicy, LossConfig, LossError, LossOutput,
};
use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};

/// Worst relative error between analytic and central-difference gradients,
/// per loss, over every batch and over both the full gradient and the
/// per-anchor closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub batches: usize,
    pub loss_out: f64,
    pub loss_in_include_guides: f64,
    pub loss_in_exclude_guides: f64,
}

impl GradcheckReport {
    pub fn max(&self) -> f64 {
        self.loss_out
            .max(self.loss_in_include_guides)
            .max(self.loss_in_exclude_guides)
    }

    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [
            ("loss_out", self.loss_out),
            ("loss_in/include-guides", self.loss_in_include_guides),
            ("loss_in/exclude-guides", self.loss_in_exclude_guides),
        ]
    }
}

const VIEWS: usize = 8;
const DIM: usize = 16;
const VERBS: usize = 3;
const GUIDES_PER_VIEW: usize = 3;

fn worst_error(
    raw: &RawBatch,
    out: &LossOutput,
    mean: impl Fn(&RawBatch) -> f64,
    anchor: impl Fn(&RawBatch, usize) -> Option<f64>,
) -> Result<f64, LossError> {
    let fd_err = |e| LossError::ShapeMismatch(format!("finite differences: {e}"));
    let full = finite_diff_grad(|x| mean(&raw.with_flat(x)), &raw.flat(), DEFAULT_FD_STEP)
        .map_err(fd_err)?;
    let mut worst = relative_error(out.grad.as_slice().expect("contiguous"), &full);
    for a in &out.diagnostics.anchors {
        let i = a.anchor;
        let fd = finite_diff_grad(
            |zi| {
                let mut r = RawBatch {
                    z: raw.z.clone(),
                    verbs: raw.verbs.clone(),
                    origins: raw.origins.clone(),
                };
                r.z[i] = zi.to_vec();
                anchor(&r, i).unwrap_or(0.0)
            },
            &raw.z[i],
            DEFAULT_FD_STEP,
        )
        .map_err(fd_err)?;
        let analytic = out.anchor_grad.row(i).to_vec();
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(worst)
}

/// Checks both losses on `batches` random batches of 8 unit views in 16
/// dimensions (three guides per view for the inner loss) at the default
/// temperatures.
pub fn gradient_conformance(seed: u64, batches: usize) -> Result<GradcheckReport, LossError> {
    let base = LossConfig::default();
    let (tau_out, tau_in) = (base.tau_out, base.tau_in);
    let mut report = GradcheckReport {
        batches,
        loss_out: 0.0,
        loss_in_include_guides: 0.0,
        loss_in_exclude_guides: 0.0,
    };
    for b in 0..batches as u64 {
        let batch_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(b);

        let raw = random_batch(batch_seed, VIEWS, DIM, VERBS, 0);
        let eb = raw.to_batch();
        let out = loss_out(&eb, &build_positive_bags(&eb), &base)?;
        let e = worst_error(
            &raw,
            &out,
            |r| r.out_mean(tau_out),
            |r, i| r.out_anchor(i, tau_out),
        )?;
        report.loss_out = report.loss_out.max(e);

        let raw = random_batch(batch_seed, VIEWS, DIM, VERBS, GUIDES_PER_VIEW);
        let eb = raw.to_batch();
        let bags = build_positive_bags(&eb);
        for policy in [
            DenominatorPolicy::IncludeGuides,
            DenominatorPolicy::ExcludeGuides,
        ] {
            let cfg = LossConfig {
                policy,
                ..base.clone()
            };
            let out = loss_in(&eb, &bags, &cfg)?;
            let e = worst_error(
                &raw,
                &out,
                |r| r.in_mean(tau_in, policy),
                |r, i| r.in_anchor(i, tau_in, policy, true),
            )?;
            let slot = match policy {
                DenominatorPolicy::IncludeGuides => &mut report.loss_in_include_guides,
                DenominatorPolicy::ExcludeGuides => &mut report.loss_in_exclude_guides,
            };
            *slot = slot.max(e);
        }
    }
    Ok(report)
}
