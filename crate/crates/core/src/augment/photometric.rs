use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::numerics::SeededRng;

/// One draw of photometric parameters, applied identically to every frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub blur_sigma: f32,
    pub seed: u64,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn sample(jitter: &PhotometricJitter, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, 0x5048_4f54);
        let factor = |amount: f32, rng: &mut SeededRng| {
            if amount > 0.0 {
                rng.gen_range((1.0 - amount).max(0.0)..=1.0 + amount)
            } else {
                1.0
            }
        };
        let brightness = factor(jitter.brightness, &mut rng);
        let contrast = factor(jitter.contrast, &mut rng);
        let saturation = factor(jitter.saturation, &mut rng);
        let blur_sigma = if jitter.blur_prob > 0.0 && rng.gen::<f32>() < jitter.blur_prob {
            rng.gen_range(jitter.blur_sigma.0..=jitter.blur_sigma.1)
        } else {
            0.0
        };
        Self {
            brightness,
            contrast,
            saturation,
            blur_sigma,
            seed,
        }
    }
}

/// Ranges for random color jitter and gaussian blur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
}

impl Default for PhotometricJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

/// Brightness, contrast and saturation scaling followed by a gaussian blur,
/// with one parameter set for all frames; the result is clamped to `[0, 1]`.
pub fn photometric_view(x: &Clip, p: &PhotometricParams) -> Clip {
    let mut data = x.data().mapv(|v| v * p.brightness);
    let channels = x.channels();
    for mut frame in data.axis_iter_mut(Axis(0)) {
        if p.contrast != 1.0 {
            let mean = frame.mean().unwrap_or(0.0);
            frame.mapv_inplace(|v| mean + p.contrast * (v - mean));
        }
        if p.saturation != 1.0 && channels > 1 {
            for mut px in frame.lanes_mut(Axis(2)) {
                let gray = if channels == 3 {
                    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
                } else {
                    px.mean().unwrap_or(0.0)
                };
                px.mapv_inplace(|v| gray + p.saturation * (v - gray));
            }
        }
    }
    if p.blur_sigma > 0.0 {
        data = gaussian_blur(&data, p.blur_sigma);
    }
    Clip::from_clamped(data)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable spatial blur of every frame and channel, edges clamped.
fn gaussian_blur(data: &Array4<f32>, sigma: f32) -> Array4<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (t, h, w, c) = data.dim();
    let mut tmp = Array4::<f32>::zeros((t, h, w, c));
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (o, kv) in k.iter().enumerate() {
                        acc += kv * data[[f, y, clamp(x as i64 + o as i64 - r, w), ch]];
                    }
                    tmp[[f, y, x, ch]] = acc;
                }
            }
        }
    }
    let mut out = Array4::<f32>::zeros((t, h, w, c));
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (o, kv) in k.iter().enumerate() {
                        acc += kv * tmp[[f, clamp(y as i64 + o as i64 - r, h), x, ch]];
                    }
                    out[[f, y, x, ch]] = acc;
                }
            }
        }
    }
    out
}
