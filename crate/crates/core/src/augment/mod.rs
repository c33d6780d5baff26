//! Guiding and view augmentations for object-agnostic pretraining.
//!
//! A [`Clip`] is a dense `T×H×W×C` intensity tensor with values in `[0, 1]`.
//! The temporal gradient used throughout is the absolute first-order frame
//! difference, rescaled so the clip-wide maximum is 1, with frame 0 zeroed.
//! Its inversion is the complement `1 − ∇x`, which keeps the static parts of
//! a clip and suppresses the moving ones.

mod bag;
mod photometric;
mod spatial;
mod temporal;

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bag::build_guiding_bag;
pub use photometric::{photometric_view, PhotometricJitter, PhotometricParams};
pub use spatial::{spatial_crop, CropMode};
pub use temporal::{temporal_sample, TemporalSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("temporal gradient needs at least 2 frames, clip has {0}")]
    TooFewFrames(usize),
    #[error("clip shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 4], right: [usize; 4] },
    #[error("cannot sample {n} frames from {frames}")]
    InvalidRange { frames: usize, n: usize },
    #[error("crop {crop:?} does not fit in a {height}x{width} clip")]
    CropTooLarge {
        crop: CropMode,
        height: usize,
        width: usize,
    },
    #[error("clip value {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("mixing weight {0} outside [0, 1]")]
    InvalidAlpha(f32),
}

/// `T×H×W×C` video tensor with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    data: Array4<f32>,
}

impl Clip {
    pub fn new(data: Array4<f32>) -> Result<Self, AugmentError> {
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AugmentError::OutOfRange(bad));
        }
        Ok(Self { data })
    }

    /// Builds a clip by clamping every value into `[0, 1]`.
    pub fn from_clamped(mut data: Array4<f32>) -> Self {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { data }
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array4::zeros((frames, height, width, channels)),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    /// Values in row-major `T, H, W, C` order.
    pub fn to_vec(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Keeps only the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Clip {
        Clip {
            data: self.data.select(ndarray::Axis(0), indices),
        }
    }
}

/// Rescaled temporal gradient of a clip; frame 0 is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientClip {
    data: Array4<f32>,
    /// True when the clip had motion and the values were rescaled by its
    /// maximum difference; false for a constant clip (all zeros).
    pub normalized: bool,
}

impl GradientClip {
    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    /// The gradient viewed as an ordinary clip (values already lie in `[0, 1]`).
    pub fn to_clip(&self) -> Clip {
        Clip {
            data: self.data.clone(),
        }
    }
}

/// Absolute frame difference `|x_t − x_{t−1}|` rescaled so the clip-wide
/// maximum is 1.
pub fn temporal_gradient(x: &Clip) -> Result<GradientClip, AugmentError> {
    let frames = x.frames();
    if frames < 2 {
        return Err(AugmentError::TooFewFrames(frames));
    }
    let mut data = Array4::<f32>::zeros(x.data.raw_dim());
    for t in 1..frames {
        let cur = x.data.index_axis(ndarray::Axis(0), t);
        let prev = x.data.index_axis(ndarray::Axis(0), t - 1);
        let mut out = data.index_axis_mut(ndarray::Axis(0), t);
        Zip::from(&mut out)
            .and(&cur)
            .and(&prev)
            .for_each(|o, &c, &p| *o = (c - p).abs());
    }
    let max = data.iter().copied().fold(0.0f32, f32::max);
    let normalized = max > 0.0;
    if normalized {
        data.mapv_inplace(|v| v / max);
    }
    Ok(GradientClip { data, normalized })
}

/// Complement `1 − g` of a gradient clip.
pub fn invert_gradient(g: &GradientClip) -> GradientClip {
    GradientClip {
        data: g.data.mapv(|v| 1.0 - v),
        normalized: g.normalized,
    }
}

/// Object mixing of two same-verb clips:
/// `α (∇xᵢ ⊙ xᵢ) + (1 − α) ((1 − ∇xⱼ) ⊙ xⱼ)`.
pub fn object_mix(xi: &Clip, xj: &Clip, alpha: f32) -> Result<Clip, AugmentError> {
    if xi.shape() != xj.shape() {
        return Err(AugmentError::ShapeMismatch {
            left: xi.shape(),
            right: xj.shape(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AugmentError::InvalidAlpha(alpha));
    }
    let gi = temporal_gradient(xi)?;
    let gj = temporal_gradient(xj)?;
    let mut out = Array4::<f32>::zeros(xi.data.raw_dim());
    Zip::from(&mut out)
        .and(&xi.data)
        .and(&gi.data)
        .and(&xj.data)
        .and(&gj.data)
        .for_each(|o, &a, &ga, &b, &gb| {
            *o = alpha * (ga * a) + (1.0 - alpha) * ((1.0 - gb) * b);
        });
    // products of values in [0,1] stay in range up to rounding
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Clip { data: out })
}

/// Options for building views and guiding bags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Mixing weight of the anchor's motion-masked term.
    pub alpha: f32,
    /// Target bag size: one temporal gradient plus object-mix partners.
    pub guide_bag_size: usize,
    pub crop: Option<CropMode>,
    pub frames_per_clip: usize,
    pub jitter: PhotometricJitter,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            guide_bag_size: 5,
            crop: None,
            frames_per_clip: 8,
            jitter: PhotometricJitter::default(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AugmentError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}
