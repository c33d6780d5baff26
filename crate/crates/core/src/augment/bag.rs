use rand::seq::index::sample;
use rand::Rng;

use super::{object_mix, temporal_gradient, AugConfig, AugmentError, Clip};

/// Guiding augmentations for one anchor: its temporal gradient followed by
/// object mixes with up to `guide_bag_size − 1` distinct partners from
/// `same_verb_pool`. The bag is truncated when the pool is too small.
pub fn build_guiding_bag<R: Rng + ?Sized>(
    anchor: &Clip,
    same_verb_pool: &[&Clip],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<Vec<Clip>, AugmentError> {
    if cfg.guide_bag_size == 0 {
        return Ok(Vec::new());
    }
    let mut bag = Vec::with_capacity(cfg.guide_bag_size);
    bag.push(temporal_gradient(anchor)?.to_clip());
    let mixes = (cfg.guide_bag_size - 1).min(same_verb_pool.len());
    for i in sample(rng, same_verb_pool.len(), mixes).into_iter() {
        bag.push(object_mix(anchor, same_verb_pool[i], cfg.alpha)?);
    }
    Ok(bag)
}
