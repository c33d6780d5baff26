//! Open-vocabulary object recognition by prompting a frozen text/image
//! embedding provider.
//!
//! A class prompt is `[prefix.., word tokens.., postfix..]`. Base classes own
//! `m` learnable word tokens initialized from their pretrained embeddings;
//! novel classes keep their pretrained tokens untouched. The shared context
//! can be shifted by a verb-conditioned offset produced by [`MetaNet`].

mod emb;
mod model;
mod provider;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Linear;
use crate::numerics::{Matrix, NumericsError, Vector};

pub use emb::{read_emb, write_emb, EmbRecord, EmbTable, DTYPE_F32_LE, EMB_MAGIC, EMB_VERSION};
pub use model::{
    base_loss, classify_embedded, classify_object, embed_frames, train_prompts, ObjectPrediction,
    PromptConfig, PromptGrads, PromptModel, PromptSample, PromptTrainLog,
};
pub use provider::{
    crop_descriptor, encode_image, Crop, CropKind, CropSet, CropStrategy, EmbeddingProvider,
    FileProvider, ImageEmbedding, Region, SyntheticProvider, SyntheticProviderConfig,
};

/// Token embeddings, one row per token.
pub type PromptSequence = Matrix;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty prompt sequence")]
    EmptySequence,
    #[error("invalid crop: {0}")]
    InvalidCrop(String),
    #[error("no embedding record named `{0}`")]
    MissingEmbedding(String),
    #[error("no token embedding for word `{0}`")]
    MissingToken(String),
    #[error("training sample {sample} is labelled with novel class `{class}`")]
    NovelLabelInTraining { sample: usize, class: String },
    #[error("class axes differ: {expected} vs {got}")]
    ClassAxisMismatch { expected: usize, got: usize },
    #[error("provider parameters changed during prompt training")]
    ProviderMutated,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    pub novel: bool,
    pretrained: Matrix,
    /// `m` slots tiled from the pretrained rows.
    slots: Matrix,
    learned: Option<Matrix>,
}

impl ObjectClass {
    pub fn pretrained(&self) -> &Matrix {
        &self.pretrained
    }

    pub fn learned(&self) -> Option<&Matrix> {
        self.learned.as_ref()
    }

    /// The `m` tokens a prompt uses: learned for base classes, the tiled
    /// pretrained rows for novel ones.
    pub fn tokens(&self) -> &Matrix {
        self.learned.as_ref().unwrap_or(&self.slots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_dim: usize,
    tokens_per_class: usize,
    classes: Vec<ObjectClass>,
}

impl Vocabulary {
    /// `pretrained[c]` holds class `c`'s word tokens, one per row. Every
    /// class fills `m` slots, slot `j` holding pretrained row `j mod rows`;
    /// base classes learn theirs, novel classes keep them.
    pub fn new(
        names: Vec<String>,
        pretrained: Vec<Matrix>,
        novel: &[bool],
        m: usize,
    ) -> Result<Self, PromptError> {
        if m == 0 {
            return Err(PromptError::ConfigInvalid(
                "tokens per class must be at least 1".into(),
            ));
        }
        if names.len() != pretrained.len() || names.len() != novel.len() {
            return Err(PromptError::ClassAxisMismatch {
                expected: names.len(),
                got: pretrained.len().min(novel.len()),
            });
        }
        let token_dim = pretrained.first().map_or(0, |p| p.ncols());
        let mut classes = Vec::with_capacity(names.len());
        for ((name, pre), &is_novel) in names.into_iter().zip(pretrained).zip(novel) {
            if pre.nrows() == 0 {
                return Err(PromptError::MissingToken(name));
            }
            if pre.ncols() != token_dim {
                return Err(PromptError::ShapeMismatch {
                    expected: token_dim,
                    got: pre.ncols(),
                });
            }
            let slots = Array2::from_shape_fn((m, token_dim), |(j, k)| pre[[j % pre.nrows(), k]]);
            let learned = (!is_novel).then(|| slots.clone());
            classes.push(ObjectClass {
                name,
                novel: is_novel,
                pretrained: pre,
                slots,
                learned,
            });
        }
        Ok(Self {
            token_dim,
            tokens_per_class: m,
            classes,
        })
    }

    /// Looks each class name up in a token table. A word is either one
    /// record named `word`, or records `word#0`, `word#1`, ... for a word the
    /// tokenizer split.
    pub fn from_token_table(
        table: &EmbTable,
        names: &[String],
        novel: &[bool],
        m: usize,
    ) -> Result<Self, PromptError> {
        let mut pretrained = Vec::with_capacity(names.len());
        for name in names {
            let rows: Vec<&[f32]> = match table.get(name) {
                Some(v) => vec![v],
                None => (0..)
                    .map_while(|j| table.get(&format!("{name}#{j}")))
                    .collect(),
            };
            if rows.is_empty() {
                return Err(PromptError::MissingToken(name.clone()));
            }
            pretrained.push(Array2::from_shape_fn(
                (rows.len(), table.dim()),
                |(j, k)| rows[j][k] as f64,
            ));
        }
        Self::new(names.to_vec(), pretrained, novel, m)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn tokens_per_class(&self) -> usize {
        self.tokens_per_class
    }

    pub fn classes(&self) -> &[ObjectClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Result<&ObjectClass, PromptError> {
        self.classes.get(id).ok_or(PromptError::UnknownClass(id))
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn novel_mask(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.novel).collect()
    }

    pub fn base_ids(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&c| !self.classes[c].novel)
            .collect()
    }

    pub fn novel_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.classes[c].novel).collect()
    }

    /// Learned token matrices of the base classes, in class order.
    pub(crate) fn learned_tokens_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.classes.iter_mut().filter_map(|c| c.learned.as_mut())
    }
}

/// Prefix and postfix context vectors shared by every class prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPrompts {
    pub prefix: Matrix,
    pub postfix: Matrix,
    pub learnable: bool,
}

impl ContextPrompts {
    pub fn random<R: Rng + ?Sized>(
        prefix_len: usize,
        postfix_len: usize,
        dim: usize,
        std: f64,
        learnable: bool,
        rng: &mut R,
    ) -> Self {
        let mut draw = |n| {
            Array2::from_shape_simple_fn((n, dim), || std * rng.sample::<f64, _>(StandardNormal))
        };
        let prefix = draw(prefix_len);
        let postfix = draw(postfix_len);
        Self {
            prefix,
            postfix,
            learnable,
        }
    }

    pub fn dim(&self) -> usize {
        self.prefix.ncols()
    }

    pub fn len(&self) -> usize {
        self.prefix.nrows() + self.postfix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bottleneck `Linear → ReLU → Linear` from a verb feature to a context shift.
/// The output layer starts at zero, so a fresh network shifts nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNet {
    pub hidden: Linear<f64>,
    pub output: Linear<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaNetCache {
    input: Matrix,
    hidden: Matrix,
}

impl MetaNet {
    /// Hidden width is `feature_dim / 16`, at least 1.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let hidden = (feature_dim / 16).max(1);
        Self {
            hidden: Linear::init(hidden, feature_dim, rng),
            output: Linear::zeros(out_dim, hidden),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn forward(&self, feature: &Vector) -> Result<(Vector, MetaNetCache), PromptError> {
        if feature.len() != self.feature_dim() {
            return Err(PromptError::ShapeMismatch {
                expected: self.feature_dim(),
                got: feature.len(),
            });
        }
        let input = feature.clone().insert_axis(ndarray::Axis(0));
        let hidden = self.hidden.forward(&input).mapv(|v| v.max(0.0));
        let out = self.output.forward(&hidden);
        Ok((out.row(0).to_owned(), MetaNetCache { input, hidden }))
    }

    /// Parameter gradients `(hidden, output)` for upstream `dL/dshift`.
    pub fn backward(&self, cache: &MetaNetCache, dshift: &Vector) -> (Linear<f64>, Linear<f64>) {
        let dy = dshift.clone().insert_axis(ndarray::Axis(0));
        let (g_out, dh) = self.output.backward(&cache.hidden, &dy);
        let dpre = dh * cache.hidden.mapv(|h| if h > 0.0 { 1.0 } else { 0.0 });
        let (g_hidden, _) = self.hidden.backward(&cache.input, &dpre);
        (g_hidden, g_out)
    }
}

/// Adds one shared shift to every prefix and postfix vector.
pub fn shift_context(ctx: &ContextPrompts, shift: &Vector) -> Result<ContextPrompts, PromptError> {
    if shift.len() != ctx.dim() {
        return Err(PromptError::ShapeMismatch {
            expected: ctx.dim(),
            got: shift.len(),
        });
    }
    Ok(ContextPrompts {
        prefix: &ctx.prefix + shift,
        postfix: &ctx.postfix + shift,
        learnable: ctx.learnable,
    })
}

/// Context vectors shifted by `metanet(verb_feature)`.
pub fn condition_context(
    ctx: &ContextPrompts,
    verb_feature: &Vector,
    metanet: &MetaNet,
) -> Result<ContextPrompts, PromptError> {
    let (shift, _) = metanet.forward(verb_feature)?;
    shift_context(ctx, &shift)
}

/// `[prefix + shift, class tokens, postfix + shift]`.
pub fn assemble_prompt(
    vocab: &Vocabulary,
    class: usize,
    ctx: &ContextPrompts,
    shift: Option<&Vector>,
) -> Result<PromptSequence, PromptError> {
    let words = vocab.class(class)?.tokens();
    if ctx.dim() != words.ncols() {
        return Err(PromptError::ShapeMismatch {
            expected: words.ncols(),
            got: ctx.dim(),
        });
    }
    let (k1, m, k2) = (ctx.prefix.nrows(), words.nrows(), ctx.postfix.nrows());
    let mut seq = Matrix::zeros((k1 + m + k2, words.ncols()));
    seq.slice_mut(s![..k1, ..]).assign(&ctx.prefix);
    seq.slice_mut(s![k1..k1 + m, ..]).assign(words);
    seq.slice_mut(s![k1 + m.., ..]).assign(&ctx.postfix);
    if let Some(shift) = shift {
        if shift.len() != ctx.dim() {
            return Err(PromptError::ShapeMismatch {
                expected: ctx.dim(),
                got: shift.len(),
            });
        }
        seq.slice_mut(s![..k1, ..])
            .zip_mut_with(&shift.broadcast((k1, shift.len())).unwrap(), |a, &b| {
                *a += b
            });
        seq.slice_mut(s![k1 + m.., ..])
            .zip_mut_with(&shift.broadcast((k2, shift.len())).unwrap(), |a, &b| {
                *a += b
            });
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub gamma: f64,
    /// `true` for classes in the novel vocabulary, indexed by class.
    pub novel: Vec<bool>,
}

impl EnsembleConfig {
    pub const DEFAULT_GAMMA: f64 = 0.56;

    pub fn new(gamma: f64, novel: Vec<bool>) -> Result<Self, PromptError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(PromptError::ConfigInvalid(format!(
                "gamma {gamma} outside [0, 1]"
            )));
        }
        Ok(Self { gamma, novel })
    }
}

/// Base classes take `γ` of the base-tuned model and novel classes take `γ`
/// of the novel-tuned model; the other model supplies the remainder.
pub fn ensemble(
    p_base: &[f64],
    p_novel: &[f64],
    cfg: &EnsembleConfig,
) -> Result<Vector, PromptError> {
    let n = cfg.novel.len();
    for got in [p_base.len(), p_novel.len()] {
        if got != n {
            return Err(PromptError::ClassAxisMismatch { expected: n, got });
        }
    }
    let g = cfg.gamma;
    Ok((0..n)
        .map(|c| {
            if cfg.novel[c] {
                (1.0 - g) * p_base[c] + g * p_novel[c]
            } else {
                g * p_base[c] + (1.0 - g) * p_novel[c]
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
