//! Trainable verb encoder: an MLP backbone over flattened clips, a
//! normalized projection head for contrastive pretraining and a linear verb
//! classifier, each with hand-written backpropagation.
//!
//! Every parameter container carries a version counter that is bumped on
//! any mutable access. Forward caches record the version they were built
//! against, and backward refuses a cache built against different weights.

mod checkpoint;
mod train;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, Clip};
use crate::contrastive::LossError;
use crate::numerics::{normalize_vjp, Matrix, NumericsError, Real, Vector, NORM_EPS};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, LayerKind, CHECKPOINT_VERSION,
};
pub use train::{
    finetune_verb, predict_verb, predict_verbs, softmax_cross_entropy, train_oap, FinetuneLog,
    FinetuneMode, OapOutcome, TrainConfig, TrainLog, TrainingSet,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("forward cache was built at parameter version {cache}, parameters are at {params}")]
    StaleCache { cache: u64, params: u64 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<F = f32> {
    pub weight: Matrix<F>,
    pub bias: Vector<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros((out, inp)),
            bias: Vector::zeros(out),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inp as f64).sqrt();
        let weight = Array2::from_shape_fn((out, inp), |_| F::of(rng.gen_range(-bound..bound)));
        Self {
            weight,
            bias: Vector::zeros(out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-batched forward: `x` is `B × in`.
    pub fn forward(&self, x: &Matrix<F>) -> Matrix<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns the parameter gradient and `dL/dx` for upstream `dy`.
    pub fn backward(&self, x: &Matrix<F>, dy: &Matrix<F>) -> (Linear<F>, Matrix<F>) {
        let grad = Linear {
            weight: dy.t().dot(x),
            bias: dy.sum_axis(Axis(0)),
        };
        (grad, dy.dot(&self.weight))
    }

    pub fn tensors(&self) -> [&[F]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [F]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn cast<G: Real>(&self) -> Linear<G> {
        Linear {
            weight: self.weight.mapv(|v| G::of(v.as_f64())),
            bias: self.bias.mapv(|v| G::of(v.as_f64())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

/// Gradient containers mirror the parameter layout.
pub type Gradients<F> = Vec<Linear<F>>;

/// Flat views over a model's parameters. Mutable access bumps the version.
pub trait Parameters<F: Real> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;
    fn version(&self) -> u64;
}

/// Geometry of the clips an encoder accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Append the signed frame difference `x[t] − x[t−1]` as extra input.
    pub diff_channel: bool,
}

impl InputSpec {
    pub fn of_clip(clip: &Clip, diff_channel: bool) -> Self {
        let [frames, height, width, channels] = clip.shape();
        Self {
            frames,
            height,
            width,
            channels,
            diff_channel,
        }
    }

    fn clip_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn dim(&self) -> usize {
        self.clip_len() * if self.diff_channel { 2 } else { 1 }
    }

    pub fn flatten_into<F: Real>(&self, clip: &Clip, out: &mut [F]) -> Result<(), EncoderError> {
        let want = [self.frames, self.height, self.width, self.channels];
        if clip.shape() != want || out.len() != self.dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{want:?}"),
                got: format!("{:?}", clip.shape()),
            });
        }
        let n = self.clip_len();
        for (o, &v) in out.iter_mut().zip(clip.data().iter()) {
            *o = F::of(v as f64);
        }
        if self.diff_channel {
            let frame = n / self.frames;
            let (raw, diff) = out.split_at_mut(n);
            diff[..frame].fill(F::zero());
            for k in frame..n {
                diff[k] = raw[k] - raw[k - frame];
            }
        }
        Ok(())
    }

    pub fn batch<F: Real>(&self, clips: &[&Clip]) -> Result<Matrix<F>, EncoderError> {
        let mut x = Matrix::zeros((clips.len(), self.dim()));
        for (mut row, clip) in x.rows_mut().into_iter().zip(clips) {
            self.flatten_into(clip, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    version: u64,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Matrix<F>>,
}

impl<F> EncoderCache<F> {
    pub fn features(&self) -> &Matrix<F> {
        self.acts.last().expect("cache holds the input")
    }
}

/// MLP backbone with ReLU after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F = f32> {
    input: InputSpec,
    layers: Vec<Linear<F>>,
    version: u64,
}

impl<F: Real> Encoder<F> {
    /// `widths` are the hidden widths; the last one is the feature dimension.
    pub fn new<R: Rng + ?Sized>(
        input: InputSpec,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(EncoderError::ConfigInvalid(format!(
                "hidden widths {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut inp = input.dim();
        for &w in widths {
            layers.push(Linear::init(w, inp, rng));
            inp = w;
        }
        Ok(Self {
            input,
            layers,
            version: 0,
        })
    }

    pub fn from_layers(input: InputSpec, layers: Vec<Linear<F>>) -> Result<Self, EncoderError> {
        let mut inp = input.dim();
        for l in &layers {
            if l.in_dim() != inp || l.bias.len() != l.out_dim() {
                return Err(EncoderError::ShapeMismatch {
                    expected: format!("layer input {inp}"),
                    got: format!("{}x{}", l.out_dim(), l.in_dim()),
                });
            }
            inp = l.out_dim();
        }
        if layers.is_empty() {
            return Err(EncoderError::ConfigInvalid("encoder has no layers".into()));
        }
        Ok(Self {
            input,
            layers,
            version: 0,
        })
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[Linear<F>] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn forward(&self, x: Matrix<F>) -> Result<EncoderCache<F>, EncoderError> {
        if x.ncols() != self.input.dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{} input columns", self.input.dim()),
                got: x.ncols().to_string(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for l in &self.layers {
            let mut y = l.forward(acts.last().expect("nonempty"));
            y.mapv_inplace(|v| v.max(F::zero()));
            acts.push(y);
        }
        Ok(EncoderCache {
            version: self.version,
            acts,
        })
    }

    pub fn features(&self, clips: &[&Clip]) -> Result<Matrix<F>, EncoderError> {
        let mut cache = self.forward(self.input.batch(clips)?)?;
        Ok(cache.acts.pop().expect("nonempty"))
    }

    /// Feature vector of one clip.
    pub fn encode(&self, clip: &Clip) -> Result<Vector<F>, EncoderError> {
        Ok(self.features(&[clip])?.row(0).to_owned())
    }

    /// Parameter gradients for upstream `dL/dfeatures`, plus `dL/dinput`.
    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        dfeat: &Matrix<F>,
    ) -> Result<(Gradients<F>, Matrix<F>), EncoderError> {
        check_version(cache.version, self.version)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dy = dfeat.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dy.zip_mut_with(&cache.acts[l + 1], |g, &a| {
                if a <= F::zero() {
                    *g = F::zero();
                }
            });
            let (g, dx) = layer.backward(&cache.acts[l], &dy);
            grads.push(g);
            dy = dx;
        }
        grads.reverse();
        Ok((grads, dy))
    }

    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            input: self.input,
            layers: self.layers.iter().map(Linear::cast).collect(),
            version: 0,
        }
    }
}

fn check_version(cache: u64, params: u64) -> Result<(), EncoderError> {
    if cache == params {
        Ok(())
    } else {
        Err(EncoderError::StaleCache { cache, params })
    }
}

macro_rules! impl_parameters {
    ($ty:ident, $($field:tt)+) => {
        impl<F: Real> Parameters<F> for $ty<F> {
            fn tensors(&self) -> Vec<&[F]> {
                self.$($field)+.iter().flat_map(|l| l.tensors()).collect()
            }

            fn tensors_mut(&mut self) -> Vec<&mut [F]> {
                self.version += 1;
                self.$($field)+.iter_mut().flat_map(|l| l.tensors_mut()).collect()
            }

            fn version(&self) -> u64 {
                self.version
            }
        }
    };
}

impl_parameters!(Encoder, layers);

/// Affine head followed by normalization onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<F = f32> {
    layer: [Linear<F>; 1],
    version: u64,
}

impl_parameters!(Projection, layer);

#[derive(Debug, Clone)]
pub struct ProjectionCache<F> {
    version: u64,
    features: Matrix<F>,
    z: Matrix<F>,
    norms: Vector<F>,
}

impl<F> ProjectionCache<F> {
    pub fn embeddings(&self) -> &Matrix<F> {
        &self.z
    }
}

impl<F: Real> Projection<F> {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self::from_layer(Linear::init(embed_dim, feature_dim, rng))
    }

    pub fn from_layer(layer: Linear<F>) -> Self {
        Self {
            layer: [layer],
            version: 0,
        }
    }

    pub fn layer(&self) -> &Linear<F> {
        &self.layer[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.layer[0].out_dim()
    }

    pub fn forward(&self, features: Matrix<F>) -> Result<ProjectionCache<F>, EncoderError> {
        let mut z = self.layer[0].forward(&features);
        let mut norms = Vector::zeros(z.nrows());
        for (mut row, n) in z.rows_mut().into_iter().zip(norms.iter_mut()) {
            let len = row.dot(&row).sqrt();
            if !(len.as_f64() > NORM_EPS) {
                return Err(NumericsError::ZeroVector(len.as_f64()).into());
            }
            row.mapv_inplace(|v| v / len);
            *n = len;
        }
        Ok(ProjectionCache {
            version: self.version,
            features,
            z,
            norms,
        })
    }

    /// Unit embedding of a single feature vector.
    pub fn project(&self, feature: &Vector<F>) -> Result<Vector<F>, EncoderError> {
        let cache = self.forward(feature.clone().insert_axis(Axis(0)))?;
        Ok(cache.z.row(0).to_owned())
    }

    /// Gradient of the head and `dL/dfeatures` for upstream `dL/dz`,
    /// including the normalization Jacobian.
    pub fn backward(
        &self,
        cache: &ProjectionCache<F>,
        dz: &Matrix<F>,
    ) -> Result<(Linear<F>, Matrix<F>), EncoderError> {
        check_version(cache.version, self.version)?;
        let mut dv = Matrix::zeros(dz.raw_dim());
        for r in 0..dz.nrows() {
            dv.row_mut(r)
                .assign(&normalize_vjp(cache.z.row(r), cache.norms[r], dz.row(r)));
        }
        Ok(self.layer[0].backward(&cache.features, &dv))
    }

    pub fn cast<G: Real>(&self) -> Projection<G> {
        Projection::from_layer(self.layer[0].cast())
    }
}

/// Linear verb classifier over backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F = f32> {
    layer: [Linear<F>; 1],
    version: u64,
}

impl_parameters!(Classifier, layer);

impl<F: Real> Classifier<F> {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, num_verbs: usize, rng: &mut R) -> Self {
        Self::from_layer(Linear::init(num_verbs, feature_dim, rng))
    }

    pub fn from_layer(layer: Linear<F>) -> Self {
        Self {
            layer: [layer],
            version: 0,
        }
    }

    pub fn layer(&self) -> &Linear<F> {
        &self.layer[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layer[0].out_dim()
    }

    pub fn logits(&self, features: &Matrix<F>) -> Matrix<F> {
        self.layer[0].forward(features)
    }
}

/// Full embedding path `normalize(g(f(x)))` with both caches.
pub struct EmbedCache<F> {
    pub encoder: EncoderCache<F>,
    pub projection: ProjectionCache<F>,
}

pub fn embed<F: Real>(
    encoder: &Encoder<F>,
    projection: &Projection<F>,
    x: Matrix<F>,
) -> Result<EmbedCache<F>, EncoderError> {
    let enc = encoder.forward(x)?;
    let proj = projection.forward(enc.features().clone())?;
    Ok(EmbedCache {
        encoder: enc,
        projection: proj,
    })
}

/// Parameter gradients of both networks for upstream `dL/dz`.
pub fn backward<F: Real>(
    encoder: &Encoder<F>,
    projection: &Projection<F>,
    cache: &EmbedCache<F>,
    dz: &Matrix<F>,
) -> Result<(Gradients<F>, Linear<F>), EncoderError> {
    let (proj_grad, dfeat) = projection.backward(&cache.projection, dz)?;
    let (enc_grads, _) = encoder.backward(&cache.encoder, &dfeat)?;
    Ok((enc_grads, proj_grad))
}

#[cfg(test)]
mod tests;
