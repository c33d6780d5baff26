//! Frozen text/image embedding providers and the per-frame crop sets they
//! consume.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView1, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbTable, PromptError, PromptSequence};
use crate::bench::{BoxKind, CropBox};
use crate::numerics::{norm, normalize, normalize_vjp, Matrix, NumericsError, SeededRng, Vector};

/// A frozen pair of maps onto the unit sphere of dimension [`embed_dim`](Self::embed_dim).
pub trait EmbeddingProvider {
    fn token_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode_text(&self, seq: &PromptSequence) -> Result<Vector, PromptError>;
    /// `dL/dtokens` given `dL/d(encode_text(seq))`.
    fn text_vjp(
        &self,
        seq: &PromptSequence,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<Matrix, PromptError>;
    fn encode_crop(&self, crops: &CropSet, crop: &Crop) -> Result<Vector, PromptError>;
    /// SHA-256 over every parameter the provider holds.
    fn digest(&self) -> [u8; 32];
}

/// Pixel rectangle `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Region {
    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn union(&self, other: &Region) -> Region {
        Region {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Smallest pixel rectangle covering a fractional box, clipped to the frame.
    pub fn covering(b: &CropBox, height: usize, width: usize) -> Region {
        let clip = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
        Region {
            x1: clip(b.x1.floor(), width),
            y1: clip(b.y1.floor(), height),
            x2: clip(b.x2.ceil(), width),
            y2: clip(b.y2.ceil(), height),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropKind {
    Full,
    Object,
    Hand,
    Union,
}

/// A crop of one frame. `index` is its position in [`CropSet::crops`] and
/// is the `cropindex` part of file-provider record names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub index: usize,
    pub kind: CropKind,
    pub region: Region,
}

/// One frame's crops: the full frame plus detected object and hand boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    image_id: String,
    height: usize,
    width: usize,
    pixels: Option<Array3<f32>>,
    objects: Vec<Region>,
    hands: Vec<Region>,
}

impl CropSet {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        objects: Vec<Region>,
        hands: Vec<Region>,
    ) -> Result<Self, PromptError> {
        if height == 0 || width == 0 {
            return Err(PromptError::InvalidCrop("frame has zero area".into()));
        }
        for r in objects.iter().chain(&hands) {
            if r.x1 >= r.x2 || r.y1 >= r.y2 || r.x2 > width || r.y2 > height {
                return Err(PromptError::InvalidCrop(format!(
                    "{r:?} is empty or outside a {height}x{width} frame"
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            pixels: None,
            objects,
            hands,
        })
    }

    /// Crop set over a frame stored as `H × W × C`, taking the boxes of
    /// `frame_index` from an annotation list. Boxes with no pixel area are dropped.
    pub fn from_frame(
        image_id: impl Into<String>,
        frame: ArrayView3<'_, f32>,
        frame_index: usize,
        boxes: &[CropBox],
    ) -> Result<Self, PromptError> {
        let (h, w, _) = frame.dim();
        let mut objects = Vec::new();
        let mut hands = Vec::new();
        for b in boxes.iter().filter(|b| b.frame == frame_index) {
            let r = Region::covering(b, h, w);
            if r.x1 >= r.x2 || r.y1 >= r.y2 {
                continue;
            }
            match b.kind {
                BoxKind::Object => objects.push(r),
                BoxKind::Hand => hands.push(r),
            }
        }
        let mut set = Self::new(image_id, h, w, objects, hands)?;
        set.pixels = Some(frame.to_owned());
        Ok(set)
    }

    pub fn with_pixels(mut self, pixels: Array3<f32>) -> Result<Self, PromptError> {
        let (h, w, _) = pixels.dim();
        if (h, w) != (self.height, self.width) {
            return Err(PromptError::InvalidCrop(format!(
                "pixels are {h}x{w}, crop set frame is {}x{}",
                self.height, self.width
            )));
        }
        self.pixels = Some(pixels);
        Ok(self)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn pixels(&self) -> Option<&Array3<f32>> {
        self.pixels.as_ref()
    }

    pub fn full(&self) -> Region {
        Region {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
        }
    }

    /// Canonical crop order: full frame, object boxes, hand boxes, then the
    /// union of all object and hand boxes when there is at least one.
    pub fn crops(&self) -> Vec<Crop> {
        let mut out = vec![Crop {
            index: 0,
            kind: CropKind::Full,
            region: self.full(),
        }];
        for r in &self.objects {
            out.push(Crop {
                index: out.len(),
                kind: CropKind::Object,
                region: *r,
            });
        }
        for r in &self.hands {
            out.push(Crop {
                index: out.len(),
                kind: CropKind::Hand,
                region: *r,
            });
        }
        if let Some(u) = self
            .objects
            .iter()
            .chain(&self.hands)
            .copied()
            .reduce(|a, b| a.union(&b))
        {
            out.push(Crop {
                index: out.len(),
                kind: CropKind::Union,
                region: u,
            });
        }
        out
    }

    /// Crops a strategy selects, and whether it fell back to the full frame.
    pub fn select(&self, strategy: CropStrategy) -> (Vec<Crop>, bool) {
        let all = self.crops();
        let full = all[0];
        let of = |kind| {
            all.iter()
                .filter(|c| c.kind == kind)
                .copied()
                .collect::<Vec<_>>()
        };
        let chosen = match strategy {
            CropStrategy::Full => return (vec![full], false),
            CropStrategy::Objects => of(CropKind::Object),
            CropStrategy::Hands => of(CropKind::Hand),
            CropStrategy::ObjectsHands => of(CropKind::Union),
            CropStrategy::ObjectsHandsFull => {
                let mut u = of(CropKind::Union);
                if !u.is_empty() {
                    u.push(full);
                }
                u
            }
        };
        if chosen.is_empty() {
            (vec![full], true)
        } else {
            (chosen, false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropStrategy {
    Full,
    Objects,
    Hands,
    ObjectsHands,
    #[default]
    ObjectsHandsFull,
}

impl CropStrategy {
    pub const ALL: [CropStrategy; 5] = [
        CropStrategy::Full,
        CropStrategy::Objects,
        CropStrategy::Hands,
        CropStrategy::ObjectsHands,
        CropStrategy::ObjectsHandsFull,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CropStrategy::Full => "full",
            CropStrategy::Objects => "objects",
            CropStrategy::Hands => "hands",
            CropStrategy::ObjectsHands => "objects-hands",
            CropStrategy::ObjectsHandsFull => "objects-hands-full",
        }
    }
}

impl fmt::Display for CropStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CropStrategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PromptError::ConfigInvalid(format!("unknown crop strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vector,
    /// The strategy found none of its crops and used the full frame.
    pub fell_back: bool,
}

/// Embeds every crop the strategy selects, then averages and renormalizes.
pub fn encode_image<P: EmbeddingProvider + ?Sized>(
    crops: &CropSet,
    provider: &P,
    strategy: CropStrategy,
) -> Result<ImageEmbedding, PromptError> {
    let (selected, fell_back) = crops.select(strategy);
    let mut sum = Vector::zeros(provider.embed_dim());
    for c in &selected {
        sum += &provider.encode_crop(crops, c)?;
    }
    Ok(ImageEmbedding {
        vector: normalize(sum.view())?,
        fell_back,
    })
}

const TEXTURE_FEATURES: usize = 3;
/// Pixels at or above this share of the crop's peak count as foreground.
const FOREGROUND: f64 = 0.25;

/// Brightness-normalized appearance of a crop at its native resolution:
/// an `s × s` area-averaged occupancy grid per channel (centred on 0.5) and
/// the mean absolute horizontal, vertical and diagonal neighbour contrast
/// between foreground pixels (centred on 0.3, weighted by `s`).
pub fn crop_descriptor(frame: ArrayView3<'_, f32>, region: &Region, s: usize) -> Vector {
    let c = frame.dim().2;
    let (h, w) = (region.height(), region.width());
    let crop = frame
        .slice(ndarray::s![region.y1..region.y2, region.x1..region.x2, ..])
        .mapv(f64::from);
    let gray = crop.mean_axis(ndarray::Axis(2)).expect("channels > 0");
    let peak = gray.iter().copied().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };

    let weights = |n: usize| -> Vec<Vec<(usize, f64)>> {
        (0..s)
            .map(|i| {
                let (a, b) = (
                    i as f64 * n as f64 / s as f64,
                    (i + 1) as f64 * n as f64 / s as f64,
                );
                (a.floor() as usize..(b.ceil() as usize).min(n))
                    .map(|p| (p, ((p + 1) as f64).min(b) - (p as f64).max(a)))
                    .filter(|&(_, o)| o > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(h), weights(w));
    let mut x = Vector::zeros(s * s * c + TEXTURE_FEATURES);
    for i in 0..s {
        for j in 0..s {
            let area: f64 =
                wy[i].iter().map(|p| p.1).sum::<f64>() * wx[j].iter().map(|p| p.1).sum::<f64>();
            for ch in 0..c {
                let mut acc = 0.0;
                for &(y, oy) in &wy[i] {
                    for &(xx, ox) in &wx[j] {
                        acc += oy * ox * crop[[y, xx, ch]];
                    }
                }
                x[(i * s + j) * c + ch] = acc * scale / area - 0.5;
            }
        }
    }
    let norm = gray.mapv(|v| v * scale);
    for (k, (dy, dx)) in [(0usize, 1usize), (1, 0), (1, 1)].into_iter().enumerate() {
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h.saturating_sub(dy) {
            for xx in 0..w.saturating_sub(dx) {
                let (a, b) = (norm[[y, xx]], norm[[y + dy, xx + dx]]);
                if a >= FOREGROUND && b >= FOREGROUND {
                    sum += (a - b).abs();
                    n += 1;
                }
            }
        }
        let t = if n > 0 { sum / n as f64 } else { 0.0 };
        x[s * s * c + k] = s as f64 * (t - 0.3);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProviderConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    /// Side of the occupancy grid each crop is averaged onto.
    pub crop_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticProviderConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            embed_dim: 32,
            crop_size: 4,
            channels: 1,
            seed: 0,
        }
    }
}

/// Text: `normalize(M · mean(tokens / ‖tokens‖))` (each token scaled to unit
/// length first) with `M` having orthonormal rows.
/// Image: [`crop_descriptor`], Gaussian random projection, normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProvider {
    cfg: SyntheticProviderConfig,
    text_map: Matrix,
    image_map: Matrix,
}

impl SyntheticProvider {
    pub fn new(cfg: SyntheticProviderConfig) -> Result<Self, PromptError> {
        let SyntheticProviderConfig {
            token_dim,
            embed_dim,
            crop_size,
            channels,
            seed,
        } = cfg;
        if embed_dim == 0 || crop_size == 0 || channels == 0 {
            return Err(PromptError::ConfigInvalid(
                "provider dimensions must be positive".into(),
            ));
        }
        if token_dim < embed_dim {
            return Err(PromptError::ConfigInvalid(format!(
                "token dim {token_dim} is below embed dim {embed_dim}; the text map needs orthonormal rows"
            )));
        }
        let mut rng = SeededRng::new(seed, 0x5445_5854);
        let mut text_map =
            Matrix::from_shape_simple_fn((embed_dim, token_dim), || rng.sample(StandardNormal));
        orthonormalize_rows(&mut text_map)?;
        let inputs = crop_size * crop_size * channels + TEXTURE_FEATURES;
        let mut rng = SeededRng::new(seed, 0x494d_4147);
        let scale = 1.0 / (inputs as f64).sqrt();
        let image_map = Matrix::from_shape_simple_fn((embed_dim, inputs), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            cfg,
            text_map,
            image_map,
        })
    }

    pub fn config(&self) -> &SyntheticProviderConfig {
        &self.cfg
    }

    pub fn text_map(&self) -> &Matrix {
        &self.text_map
    }

    /// Embeds a raw `H × W × C` region without going through a [`CropSet`].
    pub fn encode_pixels(
        &self,
        frame: ArrayView3<'_, f32>,
        region: &Region,
    ) -> Result<Vector, PromptError> {
        let (h, w, c) = frame.dim();
        if c != self.cfg.channels {
            return Err(PromptError::ShapeMismatch {
                expected: self.cfg.channels,
                got: c,
            });
        }
        if region.x1 >= region.x2 || region.y1 >= region.y2 || region.x2 > w || region.y2 > h {
            return Err(PromptError::InvalidCrop(format!(
                "{region:?} outside a {h}x{w} frame"
            )));
        }
        let x = crop_descriptor(frame, region, self.cfg.crop_size);
        Ok(normalize(self.image_map.dot(&x).view())?)
    }

    /// Pretrained word embeddings aligned with image prototypes: each of the
    /// `tokens_per_word` tokens is `Mᵀ·prototype` plus isotropic Gaussian
    /// noise of expected norm `noise`.
    pub fn pretrained_tokens<R: Rng + ?Sized>(
        &self,
        prototypes: &[Vector],
        noise: f64,
        tokens_per_word: usize,
        rng: &mut R,
    ) -> Result<Vec<Matrix>, PromptError> {
        if tokens_per_word == 0 {
            return Err(PromptError::ConfigInvalid(
                "tokens_per_word must be at least 1".into(),
            ));
        }
        let sigma = noise / (self.cfg.token_dim as f64).sqrt();
        prototypes
            .iter()
            .map(|p| {
                if p.len() != self.cfg.embed_dim {
                    return Err(PromptError::ShapeMismatch {
                        expected: self.cfg.embed_dim,
                        got: p.len(),
                    });
                }
                let aligned = self.text_map.t().dot(p);
                let mut out = Matrix::zeros((tokens_per_word, self.cfg.token_dim));
                for mut row in out.outer_iter_mut() {
                    row.assign(&aligned);
                    row.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
                }
                Ok(out)
            })
            .collect()
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn encode_text(&self, seq: &PromptSequence) -> Result<Vector, PromptError> {
        let (units, _) = unit_tokens(seq, self.cfg.token_dim)?;
        let mean = units.mean_axis(Axis(0)).expect("nonempty");
        Ok(normalize(self.text_map.dot(&mean).view())?)
    }

    fn text_vjp(
        &self,
        seq: &PromptSequence,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<Matrix, PromptError> {
        let (units, norms) = unit_tokens(seq, self.cfg.token_dim)?;
        let v = self
            .text_map
            .dot(&units.mean_axis(Axis(0)).expect("nonempty"));
        let z = normalize(v.view())?;
        let dv = normalize_vjp(z.view(), norm(v.view()), upstream);
        let dunit = self.text_map.t().dot(&dv) / seq.nrows() as f64;
        let mut out = Matrix::zeros(seq.raw_dim());
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            row.assign(&normalize_vjp(units.row(i), norms[i], dunit.view()));
        }
        Ok(out)
    }

    fn encode_crop(&self, crops: &CropSet, crop: &Crop) -> Result<Vector, PromptError> {
        let pixels = crops.pixels().ok_or_else(|| {
            PromptError::InvalidCrop(format!("crop set `{}` carries no pixels", crops.image_id()))
        })?;
        self.encode_pixels(pixels.view(), &crop.region)
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"synthetic");
        for v in [
            self.cfg.token_dim,
            self.cfg.embed_dim,
            self.cfg.crop_size,
            self.cfg.channels,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.cfg.seed.to_le_bytes());
        hash_matrix(&mut h, &self.text_map);
        hash_matrix(&mut h, &self.image_map);
        h.finalize().into()
    }
}

/// Provider over precomputed image embeddings. Crops resolve to records named
/// `imageid#cropindex`; the text map is `normalize(mean(tokens))`, so token
/// and embedding dimensions coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct FileProvider {
    images: EmbTable,
}

impl FileProvider {
    pub fn new(images: EmbTable) -> Self {
        Self { images }
    }

    pub fn record_name(image_id: &str, crop_index: usize) -> String {
        format!("{image_id}#{crop_index}")
    }
}

impl EmbeddingProvider for FileProvider {
    fn token_dim(&self) -> usize {
        self.images.dim()
    }

    fn embed_dim(&self) -> usize {
        self.images.dim()
    }

    fn encode_text(&self, seq: &PromptSequence) -> Result<Vector, PromptError> {
        Ok(normalize(mean_tokens(seq, self.images.dim())?.view())?)
    }

    fn text_vjp(
        &self,
        seq: &PromptSequence,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<Matrix, PromptError> {
        let v = mean_tokens(seq, self.images.dim())?;
        let z = normalize(v.view())?;
        let dmean = normalize_vjp(z.view(), norm(v.view()), upstream) / seq.nrows() as f64;
        Ok(broadcast_rows(&dmean, seq.nrows()))
    }

    fn encode_crop(&self, crops: &CropSet, crop: &Crop) -> Result<Vector, PromptError> {
        let name = Self::record_name(crops.image_id(), crop.index);
        let values = self
            .images
            .get(&name)
            .ok_or(PromptError::MissingEmbedding(name))?;
        let v: Vector = values.iter().map(|&x| x as f64).collect();
        Ok(normalize(v.view())?)
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"file");
        h.update(self.images.to_bytes());
        h.finalize().into()
    }
}

fn mean_tokens(seq: &PromptSequence, dim: usize) -> Result<Vector, PromptError> {
    if seq.nrows() == 0 {
        return Err(PromptError::EmptySequence);
    }
    if seq.ncols() != dim {
        return Err(PromptError::ShapeMismatch {
            expected: dim,
            got: seq.ncols(),
        });
    }
    Ok(seq.mean_axis(Axis(0)).expect("nonempty"))
}

/// Rows scaled to unit length, with their original norms.
fn unit_tokens(seq: &PromptSequence, dim: usize) -> Result<(Matrix, Vec<f64>), PromptError> {
    mean_tokens(seq, dim)?;
    let mut units = seq.clone();
    let mut norms = Vec::with_capacity(seq.nrows());
    for mut row in units.outer_iter_mut() {
        let n = norm(row.view());
        if !(n > 0.0) {
            return Err(PromptError::Numerics(NumericsError::ZeroVector(n)));
        }
        row /= n;
        norms.push(n);
    }
    Ok((units, norms))
}

fn broadcast_rows(row: &Vector, n: usize) -> Matrix {
    row.broadcast((n, row.len()))
        .expect("row broadcasts")
        .to_owned()
}

fn hash_matrix(h: &mut Sha256, m: &Matrix) {
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
}

/// Modified Gram-Schmidt over the rows of a wide matrix.
fn orthonormalize_rows(m: &mut Matrix) -> Result<(), PromptError> {
    for i in 0..m.nrows() {
        for j in 0..i {
            let (done, mut rest) = m.view_mut().split_at(Axis(0), i);
            let mut row = rest.row_mut(0);
            let proj = row.dot(&done.row(j));
            row.scaled_add(-proj, &done.row(j));
        }
        let mut row = m.row_mut(i);
        let n = norm(row.view());
        if n < 1e-10 {
            return Err(PromptError::ConfigInvalid(
                "degenerate random text map".into(),
            ));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(())
}
