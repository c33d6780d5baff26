use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    assemble_prompt, encode_image, ContextPrompts, CropSet, CropStrategy, EmbeddingProvider,
    MetaNet, MetaNetCache, PromptError, Vocabulary,
};
use crate::encoder::Linear;
use crate::numerics::{log_sum_exp, softmax, AdamState, LrSchedule, Matrix, SeededRng, Vector};

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub prefix_len: usize,
    pub postfix_len: usize,
    pub tokens_per_class: usize,
    pub context_init_std: f64,
    pub learn_context: bool,
    pub learn_vocab: bool,
    pub verb_conditioned: bool,
    /// Learned attention over frame positions instead of a plain frame average.
    pub temporal: bool,
    pub logit_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub strategy: CropStrategy,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prefix_len: 16,
            postfix_len: 16,
            tokens_per_class: 3,
            context_init_std: 0.02,
            learn_context: true,
            learn_vocab: true,
            verb_conditioned: true,
            temporal: false,
            logit_scale: 100.0,
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            warmup_epochs: 1,
            weight_decay: 1e-5,
            strategy: CropStrategy::ObjectsHandsFull,
            seed: 0,
        }
    }
}

impl PromptConfig {
    /// The preset tuned for novel classes: the default configuration.
    pub fn novel_preset() -> Self {
        Self::default()
    }

    /// The preset tuned for base classes: adds frame attention.
    pub fn base_preset() -> Self {
        Self {
            temporal: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |m: &str| Err(PromptError::ConfigInvalid(m.into()));
        if self.tokens_per_class == 0 {
            return bad("tokens_per_class must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.logit_scale > 0.0) || !(self.lr >= 0.0) || !(self.context_init_std >= 0.0) {
            return bad("logit_scale must be positive; lr and context_init_std non-negative");
        }
        Ok(())
    }
}

/// Everything prompt training learns, plus the fixed logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptModel {
    pub vocab: Vocabulary,
    pub context: ContextPrompts,
    pub metanet: Option<MetaNet>,
    /// Logits over frame positions; `None` averages frames uniformly.
    pub frame_attention: Option<Vector>,
    pub logit_scale: f64,
}

impl PromptModel {
    pub fn new(
        vocab: Vocabulary,
        context: ContextPrompts,
        metanet: Option<MetaNet>,
        frame_attention: Option<Vector>,
        logit_scale: f64,
    ) -> Result<Self, PromptError> {
        let dim = vocab.token_dim();
        if context.dim() != dim {
            return Err(PromptError::ShapeMismatch {
                expected: dim,
                got: context.dim(),
            });
        }
        if let Some(net) = &metanet {
            if net.out_dim() != dim {
                return Err(PromptError::ShapeMismatch {
                    expected: dim,
                    got: net.out_dim(),
                });
            }
        }
        Ok(Self {
            vocab,
            context,
            metanet,
            frame_attention,
            logit_scale,
        })
    }

    /// Fresh context, zero-output conditioning network and uniform frame
    /// attention, as `cfg` requests.
    pub fn from_config(
        cfg: &PromptConfig,
        vocab: Vocabulary,
        feature_dim: usize,
        frames: usize,
    ) -> Result<Self, PromptError> {
        cfg.validate()?;
        if vocab.tokens_per_class() != cfg.tokens_per_class {
            return Err(PromptError::ConfigInvalid(format!(
                "vocabulary has {} tokens per class, config asks for {}",
                vocab.tokens_per_class(),
                cfg.tokens_per_class
            )));
        }
        let mut rng = SeededRng::new(cfg.seed, STREAM_INIT);
        let dim = vocab.token_dim();
        let context = ContextPrompts::random(
            cfg.prefix_len,
            cfg.postfix_len,
            dim,
            cfg.context_init_std,
            cfg.learn_context,
            &mut rng,
        );
        let metanet = cfg
            .verb_conditioned
            .then(|| MetaNet::new(feature_dim, dim, &mut rng));
        let attention = cfg.temporal.then(|| Vector::zeros(frames));
        Self::new(vocab, context, metanet, attention, cfg.logit_scale)
    }

    pub fn to_json(&self) -> Result<String, PromptError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, PromptError> {
        Ok(serde_json::from_str(s)?)
    }

    fn shift(
        &self,
        verb_feature: Option<&Vector>,
    ) -> Result<Option<(Vector, MetaNetCache)>, PromptError> {
        match (&self.metanet, verb_feature) {
            (Some(net), Some(f)) => Ok(Some(net.forward(f)?)),
            _ => Ok(None),
        }
    }

    /// Unit text embeddings of `classes`, one row each.
    pub fn text_embeddings<P: EmbeddingProvider + ?Sized>(
        &self,
        provider: &P,
        classes: &[usize],
        shift: Option<&Vector>,
    ) -> Result<Matrix, PromptError> {
        let mut out = Matrix::zeros((classes.len(), provider.embed_dim()));
        for (row, &c) in classes.iter().enumerate() {
            let seq = assemble_prompt(&self.vocab, c, &self.context, shift)?;
            out.row_mut(row).assign(&provider.encode_text(&seq)?);
        }
        Ok(out)
    }

    /// Weights the per-frame scores are averaged with.
    pub fn frame_weights(&self, frames: usize) -> Result<Vector, PromptError> {
        match &self.frame_attention {
            None if frames == 0 => Err(PromptError::ShapeMismatch {
                expected: 1,
                got: 0,
            }),
            None => Ok(Vector::from_elem(frames, 1.0 / frames as f64)),
            Some(a) if a.len() != frames => Err(PromptError::ShapeMismatch {
                expected: a.len(),
                got: frames,
            }),
            Some(a) => Ok(Vector::from(softmax(a.as_slice().expect("contiguous")))),
        }
    }
}

/// Per-frame image embeddings (`frames × embed_dim`) and the number of frames
/// whose strategy fell back to the full frame.
pub fn embed_frames<P: EmbeddingProvider + ?Sized>(
    frames: &[CropSet],
    provider: &P,
    strategy: CropStrategy,
) -> Result<(Matrix, usize), PromptError> {
    let mut out = Matrix::zeros((frames.len(), provider.embed_dim()));
    let mut fallbacks = 0;
    for (t, crops) in frames.iter().enumerate() {
        let e = encode_image(crops, provider, strategy)?;
        fallbacks += e.fell_back as usize;
        out.row_mut(t).assign(&e.vector);
    }
    Ok((out, fallbacks))
}

/// Softmax over every class of the scaled, frame-averaged cosine scores.
pub fn classify_embedded<P: EmbeddingProvider + ?Sized>(
    model: &PromptModel,
    provider: &P,
    frames: &Matrix,
    verb_feature: Option<&Vector>,
) -> Result<Vector, PromptError> {
    let classes: Vec<usize> = (0..model.vocab.len()).collect();
    let (_, logits) = scores(model, provider, frames, verb_feature, &classes)?;
    Ok(Vector::from(softmax(
        logits.as_slice().expect("contiguous"),
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    pub probs: Vector,
    pub fallbacks: usize,
}

pub fn classify_object<P: EmbeddingProvider + ?Sized>(
    frames: &[CropSet],
    verb_feature: Option<&Vector>,
    model: &PromptModel,
    provider: &P,
    strategy: CropStrategy,
) -> Result<ObjectPrediction, PromptError> {
    let (emb, fallbacks) = embed_frames(frames, provider, strategy)?;
    Ok(ObjectPrediction {
        probs: classify_embedded(model, provider, &emb, verb_feature)?,
        fallbacks,
    })
}

fn scores<P: EmbeddingProvider + ?Sized>(
    model: &PromptModel,
    provider: &P,
    frames: &Matrix,
    verb_feature: Option<&Vector>,
    classes: &[usize],
) -> Result<(Matrix, Vector), PromptError> {
    if frames.ncols() != provider.embed_dim() {
        return Err(PromptError::ShapeMismatch {
            expected: provider.embed_dim(),
            got: frames.ncols(),
        });
    }
    let shift = model.shift(verb_feature)?;
    let text = model.text_embeddings(provider, classes, shift.as_ref().map(|(s, _)| s))?;
    let pooled = model.frame_weights(frames.nrows())?.dot(frames);
    let logits = text.dot(&pooled) * model.logit_scale;
    Ok((text, logits))
}

/// One training example: per-frame image embeddings, the backbone verb
/// feature and a base-class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub frames: Matrix,
    pub verb_feature: Option<Vector>,
    pub label: usize,
}

/// Gradients with the shapes of the trainable parts of a [`PromptModel`].
/// `vocab[c]` is `None` for novel classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub vocab: Vec<Option<Matrix>>,
    pub prefix: Matrix,
    pub postfix: Matrix,
    pub metanet: Option<(Linear<f64>, Linear<f64>)>,
    pub frame_attention: Option<Vector>,
}

impl PromptGrads {
    fn zeros_like(model: &PromptModel) -> Self {
        Self {
            vocab: model
                .vocab
                .classes()
                .iter()
                .map(|c| c.learned().map(|m| Matrix::zeros(m.dim())))
                .collect(),
            prefix: Matrix::zeros(model.context.prefix.dim()),
            postfix: Matrix::zeros(model.context.postfix.dim()),
            metanet: model.metanet.as_ref().map(|n| {
                (
                    Linear::zeros(n.hidden.out_dim(), n.hidden.in_dim()),
                    Linear::zeros(n.output.out_dim(), n.output.in_dim()),
                )
            }),
            frame_attention: model
                .frame_attention
                .as_ref()
                .map(|a| Vector::zeros(a.len())),
        }
    }
}

/// Mean cross-entropy over base classes and its gradient with respect to
/// every trainable part, plus per-sample losses and correctness.
pub fn base_loss<P: EmbeddingProvider + ?Sized>(
    model: &PromptModel,
    provider: &P,
    data: &[PromptSample],
) -> Result<(f64, PromptGrads), PromptError> {
    let base = model.vocab.base_ids();
    let mut grads = PromptGrads::zeros_like(model);
    let weight = 1.0 / data.len().max(1) as f64;
    let mut total = 0.0;
    for (i, sample) in data.iter().enumerate() {
        total += accumulate(model, provider, sample, i, &base, weight, &mut grads)?.0;
    }
    Ok((total * weight, grads))
}

fn accumulate<P: EmbeddingProvider + ?Sized>(
    model: &PromptModel,
    provider: &P,
    sample: &PromptSample,
    index: usize,
    base: &[usize],
    weight: f64,
    grads: &mut PromptGrads,
) -> Result<(f64, bool), PromptError> {
    let target = base
        .iter()
        .position(|&c| c == sample.label)
        .ok_or_else(|| match model.vocab.class(sample.label) {
            Ok(c) => PromptError::NovelLabelInTraining {
                sample: index,
                class: c.name.clone(),
            },
            Err(e) => e,
        })?;
    let shift = model.shift(sample.verb_feature.as_ref())?;
    let shift_vec = shift.as_ref().map(|(s, _)| s);
    let weights = model.frame_weights(sample.frames.nrows())?;
    let pooled = weights.dot(&sample.frames);
    let text = model.text_embeddings(provider, base, shift_vec)?;
    let logits = text.dot(&pooled) * model.logit_scale;
    let logits = logits.as_slice().expect("contiguous");
    let loss = log_sum_exp(logits)? - logits[target];
    let predicted = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
        .expect("nonempty");
    let mut dlogits = Vector::from(softmax(logits));
    dlogits[target] -= 1.0;
    dlogits *= weight;

    let (k1, m) = (model.context.prefix.nrows(), model.vocab.tokens_per_class());
    let mut dshift = Vector::zeros(model.vocab.token_dim());
    let mut dpooled = Vector::zeros(pooled.len());
    for (k, &c) in base.iter().enumerate() {
        let dtext = &pooled * (dlogits[k] * model.logit_scale);
        dpooled.scaled_add(dlogits[k] * model.logit_scale, &text.row(k));
        let seq = assemble_prompt(&model.vocab, c, &model.context, shift_vec)?;
        let dseq = provider.text_vjp(&seq, dtext.view())?;
        let (dpre, dword, dpost) = (
            dseq.slice(s![..k1, ..]),
            dseq.slice(s![k1..k1 + m, ..]),
            dseq.slice(s![k1 + m.., ..]),
        );
        grads.prefix += &dpre;
        grads.postfix += &dpost;
        if let Some(g) = grads.vocab[c].as_mut() {
            *g += &dword;
        }
        dshift += &dpre.sum_axis(Axis(0));
        dshift += &dpost.sum_axis(Axis(0));
    }
    if let (Some((_, cache)), Some(net), Some((gh, go))) =
        (&shift, &model.metanet, grads.metanet.as_mut())
    {
        let (dh, dout) = net.backward(cache, &dshift);
        add_linear(gh, &dh);
        add_linear(go, &dout);
    }
    if let Some(ga) = grads.frame_attention.as_mut() {
        let dw = sample.frames.dot(&dpooled);
        let inner = weights.dot(&dw);
        *ga += &(&weights * &(dw - inner));
    }
    Ok((loss, predicted == target))
}

fn add_linear(acc: &mut Linear<f64>, g: &Linear<f64>) {
    acc.weight += &g.weight;
    acc.bias += &g.bias;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptTrainLog {
    /// Mean training loss over each epoch, measured as samples are visited.
    pub epoch_loss: Vec<f64>,
    /// Base-class training accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Cross-entropy over base classes, optimized with Adam under a warmup +
/// cosine schedule. The provider is only read; its digest is checked anyway.
pub fn train_prompts<P: EmbeddingProvider + ?Sized>(
    model: &mut PromptModel,
    data: &[PromptSample],
    provider: &P,
    cfg: &PromptConfig,
) -> Result<PromptTrainLog, PromptError> {
    cfg.validate()?;
    let digest = provider.digest();
    let base = model.vocab.base_ids();
    for (i, sample) in data.iter().enumerate() {
        let class = model.vocab.class(sample.label)?;
        if class.novel {
            return Err(PromptError::NovelLabelInTraining {
                sample: i,
                class: class.name.clone(),
            });
        }
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule::cosine(
        cfg.lr,
        cfg.warmup_epochs as u64 * steps_per_epoch,
        cfg.epochs as u64 * steps_per_epoch,
    );
    let mut opt: Vec<AdamState<f64>> = Vec::new();
    let mut rng = SeededRng::new(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = PromptTrainLog::default();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; data.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = PromptGrads::zeros_like(model);
            let weight = 1.0 / chunk.len() as f64;
            for &i in chunk {
                losses[i] = accumulate(model, provider, &data[i], i, &base, weight, &mut grads)?.0;
            }
            let lr = schedule.lr_at(step);
            step += 1;
            let (mut params, flags) = trainable_mut(model, cfg);
            let g = grad_slices(&grads, flags);
            if opt.is_empty() {
                opt = params
                    .iter()
                    .map(|p| AdamState::with_hyper(p.len(), 0.9, 0.999, 1e-8, cfg.weight_decay))
                    .collect();
            }
            for ((p, g), state) in params.iter_mut().zip(&g).zip(&mut opt) {
                state.step(p, g, lr)?;
            }
        }
        log.epoch_loss
            .push(losses.iter().sum::<f64>() / data.len().max(1) as f64);
        log.epoch_accuracy
            .push(base_accuracy(model, provider, data, &base)?);
    }
    if provider.digest() != digest {
        return Err(PromptError::ProviderMutated);
    }
    Ok(log)
}

fn base_accuracy<P: EmbeddingProvider + ?Sized>(
    model: &PromptModel,
    provider: &P,
    data: &[PromptSample],
    base: &[usize],
) -> Result<f64, PromptError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        let (_, logits) = scores(model, provider, &s.frames, s.verb_feature.as_ref(), base)?;
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .expect("nonempty");
        correct += (base[best] == s.label) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Which parameter groups train this run, in the fixed order
/// `vocab, prefix, postfix, metanet, attention`.
#[derive(Clone, Copy)]
struct Flags {
    vocab: bool,
    context: bool,
    metanet: bool,
    attention: bool,
}

fn trainable_mut<'a>(
    model: &'a mut PromptModel,
    cfg: &PromptConfig,
) -> (Vec<&'a mut [f64]>, Flags) {
    let flags = Flags {
        vocab: cfg.learn_vocab,
        context: model.context.learnable,
        metanet: model.metanet.is_some(),
        attention: model.frame_attention.is_some(),
    };
    let mut slices: Vec<&'a mut [f64]> = Vec::new();
    let PromptModel {
        vocab,
        context,
        metanet,
        frame_attention,
        ..
    } = model;
    if flags.vocab {
        slices.extend(
            vocab
                .learned_tokens_mut()
                .map(|m| m.as_slice_mut().expect("standard layout")),
        );
    }
    if flags.context {
        slices.push(context.prefix.as_slice_mut().expect("standard layout"));
        slices.push(context.postfix.as_slice_mut().expect("standard layout"));
    }
    if let Some(net) = metanet {
        for l in [&mut net.hidden, &mut net.output] {
            slices.push(l.weight.as_slice_mut().expect("standard layout"));
            slices.push(l.bias.as_slice_mut().expect("standard layout"));
        }
    }
    if let Some(a) = frame_attention {
        slices.push(a.as_slice_mut().expect("contiguous"));
    }
    (slices, flags)
}

fn grad_slices(g: &PromptGrads, flags: Flags) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    if flags.vocab {
        out.extend(
            g.vocab
                .iter()
                .flatten()
                .map(|m| m.as_slice().expect("standard layout")),
        );
    }
    if flags.context {
        out.push(g.prefix.as_slice().expect("standard layout"));
        out.push(g.postfix.as_slice().expect("standard layout"));
    }
    if flags.metanet {
        let (h, o) = g.metanet.as_ref().expect("metanet gradient");
        for l in [h, o] {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
    }
    if flags.attention {
        out.push(
            g.frame_attention
                .as_ref()
                .expect("attention gradient")
                .as_slice()
                .expect("contiguous"),
        );
    }
    out
}
