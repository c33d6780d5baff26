use rand::Rng;

use super::AugmentError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSample {
    pub start: usize,
    /// Exclusive end of the sampled interval.
    pub end: usize,
    pub indices: Vec<usize>,
}

/// Samples `n` frame indices spanning the middle of a `frames`-long video.
///
/// The start is drawn from `[0, ⌊(T−n)/2⌋]` and the end from
/// `[⌈(T+n)/2⌉, T]`; `n` indices are then spread uniformly over
/// `[start, end)`, rounding half down.
pub fn temporal_sample<R: Rng + ?Sized>(
    frames: usize,
    n: usize,
    rng: &mut R,
) -> Result<TemporalSample, AugmentError> {
    if n < 2 || frames < n {
        return Err(AugmentError::InvalidRange { frames, n });
    }
    let start = rng.gen_range(0..=(frames - n) / 2);
    let end = rng.gen_range((frames + n).div_ceil(2)..=frames);
    let span = end - start;
    let indices = (0..n)
        .map(|k| {
            // round_half_down(k·span/n) in integer arithmetic
            let num = 2 * k * span + n - 1;
            start + num / (2 * n)
        })
        .collect();
    Ok(TemporalSample {
        start,
        end,
        indices,
    })
}
