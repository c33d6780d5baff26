use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    backward, embed, Classifier, Encoder, EncoderError, InputSpec, Linear, Parameters, Projection,
};
use crate::augment::{
    build_guiding_bag, photometric_view, temporal_sample, AugConfig, Clip, PhotometricParams,
};
use crate::contrastive::{
    build_positive_bags, momentum_update, total_loss, EmbeddingBatch, LossConfig, MemoryQueue,
    Origin,
};
use crate::numerics::{softmax, AdamState, LrSchedule, Matrix, Real, SeededRng};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_VIEWS: u64 = 3;
const STREAM_GUIDES: u64 = 4;
const STREAM_FINETUNE: u64 = 5;

/// Labeled clips. `objects` only steers guide partner selection toward
/// clips showing a different object.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub clips: &'a [Clip],
    pub verbs: &'a [usize],
    pub objects: &'a [usize],
    pub num_verbs: usize,
}

impl TrainingSet<'_> {
    fn validate(&self) -> Result<(), EncoderError> {
        if self.clips.is_empty() {
            return Err(EncoderError::ConfigInvalid("empty training set".into()));
        }
        if self.verbs.len() != self.clips.len() || self.objects.len() != self.clips.len() {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{} labels", self.clips.len()),
                got: format!("{} verbs, {} objects", self.verbs.len(), self.objects.len()),
            });
        }
        if let Some(&v) = self.verbs.iter().find(|&&v| v >= self.num_verbs) {
            return Err(EncoderError::ConfigInvalid(format!(
                "verb {v} outside vocabulary of {}",
                self.num_verbs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Backbone frozen; only the classifier trains.
    LinearProbe,
    /// Backbone and classifier train jointly.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// EMA coefficient of the momentum encoder.
    pub momentum: f64,
    pub queue_size: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub diff_channel: bool,
    pub finetune_mode: FinetuneMode,
    /// Photometric jitter on fine-tuning inputs.
    pub finetune_jitter: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            finetune_lr: 1e-3,
            weight_decay: 1e-5,
            warmup_epochs: 1,
            momentum: 0.999,
            queue_size: 256,
            hidden: vec![256, 128],
            embed_dim: 64,
            diff_channel: false,
            finetune_mode: FinetuneMode::Full,
            finetune_jitter: true,
            seed: 0,
            loss: LossConfig::default(),
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::ConfigInvalid(m));
        if self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.lr > 0.0) || !(self.finetune_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        if self.embed_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("network widths must be positive".into());
        }
        if self.loss.lambda > 0.0 && self.aug.guide_bag_size == 0 {
            return bad("lambda > 0 needs a nonempty guiding bag".into());
        }
        self.loss.validate()?;
        self.aug.validate()?;
        Ok(())
    }

    fn input_spec(&self, data: &TrainingSet) -> InputSpec {
        InputSpec::of_clip(&data.clips[0], self.diff_channel)
    }

    /// Randomly initialized backbone; identical for every arm sharing a seed.
    pub fn init_encoder(&self, input: InputSpec) -> Result<Encoder<f32>, EncoderError> {
        Encoder::new(
            input,
            &self.hidden,
            &mut SeededRng::new(self.seed, STREAM_INIT),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

pub struct OapOutcome {
    pub encoder: Encoder<f32>,
    pub projection: Projection<f32>,
    pub momentum_encoder: Encoder<f32>,
    pub momentum_projection: Projection<f32>,
    pub log: TrainLog,
}

struct Optimizer {
    states: Vec<AdamState<f32>>,
}

impl Optimizer {
    fn new<P: Parameters<f32>>(params: &P, weight_decay: f64) -> Self {
        let states = params
            .tensors()
            .iter()
            .map(|t| AdamState::with_hyper(t.len(), 0.9, 0.999, 1e-8, weight_decay as f32))
            .collect();
        Self { states }
    }

    fn step<P: Parameters<f32>>(
        &mut self,
        params: &mut P,
        grads: &[Linear<f32>],
        lr: f64,
    ) -> Result<(), EncoderError> {
        let g: Vec<&[f32]> = grads.iter().flat_map(|l| l.tensors()).collect();
        for ((state, p), g) in self.states.iter_mut().zip(params.tensors_mut()).zip(g) {
            state.step(p, g, lr as f32)?;
        }
        Ok(())
    }
}

fn ema<P: Parameters<f32>>(slow: &mut P, fast: &P, m: f64) -> Result<(), EncoderError> {
    for (s, f) in slow.tensors_mut().into_iter().zip(fast.tensors()) {
        momentum_update(s, f, m as f32)?;
    }
    Ok(())
}

/// Casts to `f64` and renormalizes each row so unit-norm checks hold at
/// double precision.
fn unit_rows_f64(z: &Matrix<f32>) -> Matrix<f64> {
    let mut out = z.mapv(f64::from);
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    out
}

fn schedule(
    cfg_lr: f64,
    warmup_epochs: usize,
    epochs: usize,
    steps_per_epoch: usize,
) -> LrSchedule {
    LrSchedule::cosine(
        cfg_lr,
        (warmup_epochs * steps_per_epoch) as u64,
        (epochs * steps_per_epoch) as u64,
    )
}

fn batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Same-verb partners per clip, preferring clips of a different object.
fn partner_pools(data: &TrainingSet) -> Vec<Vec<usize>> {
    let mut by_verb: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &v) in data.verbs.iter().enumerate() {
        by_verb.entry(v).or_default().push(i);
    }
    (0..data.clips.len())
        .map(|i| {
            let same = &by_verb[&data.verbs[i]];
            let other: Vec<usize> = same
                .iter()
                .copied()
                .filter(|&j| data.objects[j] != data.objects[i])
                .collect();
            if other.is_empty() {
                same.iter().copied().filter(|&j| j != i).collect()
            } else {
                other
            }
        })
        .collect()
}

/// Object-agnostic pretraining of backbone and projection head.
pub fn train_oap(data: &TrainingSet, cfg: &TrainConfig) -> Result<OapOutcome, EncoderError> {
    cfg.validate()?;
    data.validate()?;
    let input = cfg.input_spec(data);
    let mut encoder = cfg.init_encoder(input)?;
    let mut projection = Projection::new(
        encoder.feature_dim(),
        cfg.embed_dim,
        &mut SeededRng::new(cfg.seed, STREAM_INIT).derive(&[1]),
    );
    let mut m_encoder = encoder.clone();
    let mut m_projection = projection.clone();
    let mut enc_opt = Optimizer::new(&encoder, cfg.weight_decay);
    let mut proj_opt = Optimizer::new(&projection, cfg.weight_decay);
    let mut queue = MemoryQueue::new(cfg.queue_size);
    let pools = partner_pools(data);
    let root = SeededRng::new(cfg.seed, 0);

    let steps_per_epoch = (data.clips.len() / cfg.batch_size).max(1);
    let sched = schedule(
        cfg.lr,
        cfg.warmup_epochs,
        cfg.pretrain_epochs,
        steps_per_epoch,
    );
    let mut log = TrainLog::default();
    for epoch in 0..cfg.pretrain_epochs {
        let mut shuffle = root.derive(&[STREAM_SHUFFLE, epoch as u64]);
        let mut total = 0.0;
        let mut count = 0usize;
        for (step, chunk) in batches(data.clips.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let key = [epoch as u64, step as u64];
            let mut views = Vec::with_capacity(2 * chunk.len());
            let mut view_verbs = Vec::with_capacity(2 * chunk.len());
            for &i in &chunk {
                for v in 0..2u64 {
                    let seed = root
                        .derive(&[STREAM_VIEWS, key[0], key[1], i as u64, v])
                        .next_u64();
                    views.push(photometric_view(
                        &data.clips[i],
                        &PhotometricParams::sample(&cfg.aug.jitter, seed),
                    ));
                    view_verbs.push(data.verbs[i]);
                }
            }
            let mut guides = Vec::new();
            let mut owners = Vec::new();
            for (slot, &i) in chunk.iter().enumerate() {
                let partners: Vec<&Clip> = pools[i].iter().map(|&j| &data.clips[j]).collect();
                let mut rng = root.derive(&[STREAM_GUIDES, key[0], key[1], i as u64]);
                for g in build_guiding_bag(&data.clips[i], &partners, &cfg.aug, &mut rng)? {
                    guides.push(g);
                    owners.push(slot);
                }
            }

            let view_refs: Vec<&Clip> = views.iter().collect();
            let cache = embed(&encoder, &projection, input.batch(&view_refs)?)?;
            let z_views = unit_rows_f64(cache.projection.embeddings());
            let z_guides = if guides.is_empty() {
                Matrix::zeros((0, cfg.embed_dim))
            } else {
                let refs: Vec<&Clip> = guides.iter().collect();
                unit_rows_f64(
                    embed(&m_encoder, &m_projection, input.batch(&refs)?)?
                        .projection
                        .embeddings(),
                )
            };

            // each guide is attached to both views of its clip
            let rows = views.len() + 2 * guides.len();
            let mut z = Matrix::zeros((rows, cfg.embed_dim));
            let mut verbs = view_verbs.clone();
            let mut origins = vec![Origin::View; views.len()];
            z.slice_mut(ndarray::s![..views.len(), ..]).assign(&z_views);
            let mut r = views.len();
            for v in 0..2 {
                for (g, &slot) in owners.iter().enumerate() {
                    z.row_mut(r).assign(&z_guides.row(g));
                    verbs.push(data.verbs[chunk[slot]]);
                    origins.push(Origin::Guide {
                        anchor: 2 * slot + v,
                    });
                    r += 1;
                }
            }
            let batch = EmbeddingBatch::new(z, verbs, origins)?.with_queue(&queue)?;
            let out = total_loss(&batch, &build_positive_bags(&batch), &cfg.loss)?;
            total += out.value;
            count += 1;

            let dz = out
                .grad
                .slice(ndarray::s![..views.len(), ..])
                .mapv(|g| g as f32);
            let (enc_grads, proj_grad) = backward(&encoder, &projection, &cache, &dz)?;
            let lr = sched.lr_at(log.steps);
            enc_opt.step(&mut encoder, &enc_grads, lr)?;
            proj_opt.step(&mut projection, std::slice::from_ref(&proj_grad), lr)?;
            ema(&mut m_encoder, &encoder, cfg.momentum)?;
            ema(&mut m_projection, &projection, cfg.momentum)?;

            let keys: Vec<&Clip> = views.iter().step_by(2).collect();
            let zk = unit_rows_f64(
                embed(&m_encoder, &m_projection, input.batch(&keys)?)?
                    .projection
                    .embeddings(),
            );
            let key_verbs: Vec<usize> = chunk.iter().map(|&i| data.verbs[i]).collect();
            queue.update(&zk, &key_verbs, &vec![Origin::View; keys.len()])?;
            log.steps += 1;
        }
        log.epoch_loss.push(if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        });
    }
    Ok(OapOutcome {
        encoder,
        projection,
        momentum_encoder: m_encoder,
        momentum_projection: m_projection,
        log,
    })
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Matrix<F>, labels: &[usize]) -> (f64, Matrix<F>) {
    let b = logits.nrows() as f64;
    let mut grad = Matrix::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let p = softmax(&row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, &pc) in p.iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[[r, c]] = F::of((pc - target) / b);
        }
    }
    (loss / b, grad)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Cross-entropy verb training of a fresh classifier on top of `encoder`.
/// In [`FinetuneMode::Full`] the backbone is updated in place.
pub fn finetune_verb(
    encoder: &mut Encoder<f32>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mode: FinetuneMode,
    epochs: usize,
) -> Result<(Classifier<f32>, FinetuneLog), EncoderError> {
    cfg.validate()?;
    data.validate()?;
    if epochs == 0 {
        return Err(EncoderError::ConfigInvalid(
            "fine-tuning needs at least 1 epoch".into(),
        ));
    }
    let input = *encoder.input();
    let root = SeededRng::new(cfg.seed, STREAM_FINETUNE);
    let mut classifier = Classifier::new(
        encoder.feature_dim(),
        data.num_verbs,
        &mut root.derive(&[0]),
    );
    let mut cls_opt = Optimizer::new(&classifier, cfg.weight_decay);
    let mut enc_opt = Optimizer::new(encoder, cfg.weight_decay);
    let steps_per_epoch = (data.clips.len() / cfg.batch_size).max(1);
    let sched = schedule(
        cfg.finetune_lr,
        cfg.warmup_epochs.min(epochs - 1),
        epochs,
        steps_per_epoch,
    );
    let mut log = FinetuneLog::default();
    let mut step_no = 0u64;
    for epoch in 0..epochs {
        let mut shuffle = root.derive(&[STREAM_SHUFFLE, epoch as u64]);
        let (mut total, mut correct, mut seen, mut count) = (0.0, 0usize, 0usize, 0usize);
        for (step, chunk) in batches(data.clips.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let inputs: Vec<Clip> = chunk
                .iter()
                .map(|&i| {
                    if cfg.finetune_jitter {
                        let seed = root
                            .derive(&[STREAM_VIEWS, epoch as u64, step as u64, i as u64])
                            .next_u64();
                        photometric_view(
                            &data.clips[i],
                            &PhotometricParams::sample(&cfg.aug.jitter, seed),
                        )
                    } else {
                        data.clips[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Clip> = inputs.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.verbs[i]).collect();
            let cache = encoder.forward(input.batch(&refs)?)?;
            let logits = classifier.logits(cache.features());
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            total += loss;
            count += 1;
            for (r, &y) in labels.iter().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                correct += usize::from(best == y);
                seen += 1;
            }
            let (cls_grad, dfeat) = classifier.layer().backward(cache.features(), &dlogits);
            let lr = sched.lr_at(step_no);
            if mode == FinetuneMode::Full {
                let (enc_grads, _) = encoder.backward(&cache, &dfeat)?;
                enc_opt.step(encoder, &enc_grads, lr)?;
            }
            cls_opt.step(&mut classifier, std::slice::from_ref(&cls_grad), lr)?;
            step_no += 1;
        }
        log.epoch_loss.push(total / count.max(1) as f64);
        log.epoch_accuracy
            .push(100.0 * correct as f64 / seen.max(1) as f64);
    }
    Ok((classifier, log))
}

/// Verb distribution averaged over `samples` temporal samples of `clip`.
pub fn predict_verb<R: rand::Rng + ?Sized>(
    clip: &Clip,
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>, EncoderError> {
    let n = encoder.input().frames;
    let mut acc = vec![0.0; classifier.num_classes()];
    let samples = samples.max(1);
    for _ in 0..samples {
        let ts = temporal_sample(clip.frames(), n, rng)?;
        let sub = clip.select_frames(&ts.indices);
        let logits = classifier.logits(&encoder.features(&[&sub])?);
        let p = softmax(
            &logits
                .row(0)
                .iter()
                .map(|&v| f64::from(v))
                .collect::<Vec<_>>(),
        );
        for (a, q) in acc.iter_mut().zip(p) {
            *a += q;
        }
    }
    Ok(acc.into_iter().map(|a| a / samples as f64).collect())
}

/// Single-sample verb distributions for clips already at the encoder's
/// frame count.
pub fn predict_verbs(
    clips: &[&Clip],
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
) -> Result<Vec<Vec<f64>>, EncoderError> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(256) {
        let logits = classifier.logits(&encoder.features(chunk)?);
        for row in logits.rows() {
            out.push(softmax(
                &row.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
            ));
        }
    }
    Ok(out)
}
