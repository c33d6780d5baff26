use ndarray::s;
use serde::{Deserialize, Serialize};

use super::{AugmentError, Clip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropMode {
    /// Symmetric margins on both axes.
    Center { height: usize, width: usize },
    /// Full width, rows counted up from the bottom edge.
    BottomVertical { height: usize },
}

pub fn spatial_crop(x: &Clip, mode: CropMode) -> Result<Clip, AugmentError> {
    let (h, w) = (x.height(), x.width());
    let (top, left, ch, cw) = match mode {
        CropMode::Center { height, width } if height <= h && width <= w => {
            ((h - height) / 2, (w - width) / 2, height, width)
        }
        CropMode::BottomVertical { height } if height <= h => (h - height, 0, height, w),
        _ => {
            return Err(AugmentError::CropTooLarge {
                crop: mode,
                height: h,
                width: w,
            })
        }
    };
    let view = x.data().slice(s![.., top..top + ch, left..left + cw, ..]);
    Ok(Clip::from_clamped(view.to_owned()))
}
