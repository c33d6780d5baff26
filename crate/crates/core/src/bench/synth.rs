//! Procedural compositional video benchmark. Verbs are motion programs that
//! act identically on any object; objects are static shape/texture
//! appearances. Training covers only a sparse subset of verb-object
//! compositions, so appearance carries spurious verb information that does
//! not transfer to novel objects.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    AnnotationRow, AnnotationTable, BenchError, BoxKind, CropBox, LabelVocab, Provenance, SplitSpec,
};
use crate::augment::Clip;
use crate::numerics::SeededRng;

pub const VERB_NAMES: [&str; 8] = [
    "translate-right",
    "translate-left",
    "translate-down",
    "translate-up",
    "grow",
    "shrink",
    "brighten",
    "dim",
];
const SHAPES: [&str; 4] = ["square", "disk", "cross", "diamond"];
const TEXTURES: [&str; 3] = ["solid", "striped", "checkered"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Translate { dx: i32, dy: i32 },
    Grow,
    Shrink,
    Brighten,
    Dim,
}

impl Verb {
    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Verb::Translate { dx: 1, dy: 0 },
            1 => Verb::Translate { dx: -1, dy: 0 },
            2 => Verb::Translate { dx: 0, dy: 1 },
            3 => Verb::Translate { dx: 0, dy: -1 },
            4 => Verb::Grow,
            5 => Verb::Shrink,
            6 => Verb::Brighten,
            _ => Verb::Dim,
        }
    }
}

/// Shape and texture of an object; `index = shape * 3 + texture`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appearance {
    pub shape: usize,
    pub texture: usize,
}

impl Appearance {
    pub fn from_index(i: usize) -> Self {
        Self {
            shape: i / TEXTURES.len(),
            texture: i % TEXTURES.len(),
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", TEXTURES[self.texture], SHAPES[self.shape])
    }

    /// Coverage and texture value at offset `(dx, dy)` from the center.
    fn value(&self, dx: f32, dy: f32, r: f32) -> Option<f32> {
        let (ax, ay) = (dx.abs(), dy.abs());
        let inside = match self.shape {
            0 => ax.max(ay) <= r,
            1 => dx * dx + dy * dy <= r * r,
            2 => (ax <= r / 3.0 + 0.5 && ay <= r) || (ay <= r / 3.0 + 0.5 && ax <= r),
            _ => ax + ay <= r,
        };
        if !inside {
            return None;
        }
        let (u, v) = ((dx + r).floor() as i32, (dy + r).floor() as i32);
        Some(match self.texture {
            0 => 1.0,
            1 => {
                if u.rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.35
                }
            }
            _ => {
                if (u + v).rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.35
                }
            }
        })
    }
}

/// Placement of an object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub intensity: f32,
}

impl Placement {
    /// Placement at frame `t` of `frames` under `verb`, starting from `self`.
    pub fn at(&self, verb: Verb, t: usize, frames: usize) -> Placement {
        let s = if frames > 1 {
            t as f32 / (frames - 1) as f32
        } else {
            0.0
        };
        let mut p = *self;
        match verb {
            Verb::Translate { dx, dy } => {
                p.cx += (dx * t as i32) as f32;
                p.cy += (dy * t as i32) as f32;
            }
            Verb::Grow => p.radius = 1.5 + 3.0 * s,
            Verb::Shrink => p.radius = 4.5 - 3.0 * s,
            Verb::Brighten => p.intensity = 0.3 + 0.7 * s,
            Verb::Dim => p.intensity = 1.0 - 0.7 * s,
        }
        p
    }
}

/// Paints `obj` at `p` into frame `t` of `data` with toroidal wraparound,
/// returning the painted bounding box (unwrapped pixel extents).
fn paint(data: &mut Array4<f32>, t: usize, obj: Appearance, p: &Placement) -> Option<[usize; 4]> {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let wrap = |d: f32, n: usize| {
        let n = n as f32;
        (d + n / 2.0).rem_euclid(n) - n / 2.0
    };
    let mut bbox: Option<[usize; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            let dx = wrap(x as f32 + 0.5 - p.cx, w);
            let dy = wrap(y as f32 + 0.5 - p.cy, h);
            if let Some(v) = obj.value(dx, dy, p.radius) {
                for c in 0..data.shape()[3] {
                    data[[t, y, x, c]] = (p.intensity * v).clamp(0.0, 1.0);
                }
                let b = bbox.get_or_insert([x, y, x, y]);
                *b = [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)];
            }
        }
    }
    bbox
}

/// Clip of one object undergoing `verb`, no distractors and no noise.
pub fn render_composition(
    verb: Verb,
    obj: Appearance,
    start: Placement,
    shape: [usize; 4],
) -> Clip {
    let mut data = Array4::zeros(shape);
    for t in 0..shape[0] {
        paint(&mut data, t, obj, &start.at(verb, t, shape[0]));
    }
    Clip::from_clamped(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_verbs: usize,
    pub num_objects: usize,
    pub num_novel: usize,
    /// Verbs paired with each base object in the training compositions.
    pub verbs_per_base_object: usize,
    /// Clips per base composition (split between train and test).
    pub clips_per_composition: usize,
    /// Clips per novel composition (all test).
    pub novel_clips_per_composition: usize,
    pub train_ratio: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub distractors: usize,
    /// Distractors share the active object's appearance instead of being
    /// drawn from the base objects.
    pub context_distractors: bool,
    /// Amplitude of a static per-object background pattern (the scene the
    /// object is usually found in); 0 disables it.
    pub scene_contrast: f32,
    pub noise: f32,
    pub hand: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_verbs: 8,
            num_objects: 12,
            num_novel: 4,
            verbs_per_base_object: 4,
            clips_per_composition: 50,
            novel_clips_per_composition: 10,
            train_ratio: 0.8,
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            distractors: 1,
            context_distractors: false,
            scene_contrast: 0.0,
            noise: 0.02,
            hand: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::SpecInvalid(m));
        if self.num_verbs == 0 || self.num_verbs > VERB_NAMES.len() {
            return bad(format!("num_verbs must be in 1..={}", VERB_NAMES.len()));
        }
        if self.num_objects == 0 || self.num_objects > SHAPES.len() * TEXTURES.len() {
            return bad(format!(
                "num_objects must be in 1..={}",
                SHAPES.len() * TEXTURES.len()
            ));
        }
        if self.num_novel >= self.num_objects {
            return bad("at least one object must be base".into());
        }
        let n_base = self.num_objects - self.num_novel;
        if self.verbs_per_base_object == 0 || self.verbs_per_base_object > self.num_verbs {
            return bad("verbs_per_base_object must be in 1..=num_verbs".into());
        }
        if n_base * self.verbs_per_base_object < self.num_verbs {
            return bad("base compositions cannot cover every verb".into());
        }
        if self.clips_per_composition < 2 || !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(
                "need at least 2 clips per base composition and 0 < train_ratio < 1".into(),
            );
        }
        if self.frames < 2 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return bad("clip geometry too small".into());
        }
        if !(0.0..=1.0).contains(&self.scene_contrast) {
            return bad(format!(
                "scene_contrast {} outside [0, 1]",
                self.scene_contrast
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub clips: Vec<Clip>,
    pub table: AnnotationTable,
    pub split: SplitSpec,
}

impl SynthDataset {
    pub fn verb(&self, i: usize) -> usize {
        self.table.verb_id(i)
    }

    pub fn object(&self, i: usize) -> usize {
        self.table.object_id(i)
    }

    /// Row indices of the train and test segments.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        partition(&self.table, &self.split)
    }
}

pub fn partition(table: &AnnotationTable, split: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let train: std::collections::BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    (0..table.len()).partition(|&r| train.contains(table.rows()[r].segment_id.as_str()))
}

/// Static plane-wave background tied to an object, fixed for the dataset.
fn scene_pattern(spec: &SynthSpec, object: usize) -> ndarray::Array3<f32> {
    let mut rng = SeededRng::new(spec.seed, 0x5343_4e45).derive(&[object as u64]);
    let fx: f32 = rng.gen_range(-2.0..2.0);
    let fy: f32 = rng.gen_range(-2.0..2.0);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (h, w) = (spec.height as f32, spec.width as f32);
    ndarray::Array3::from_shape_fn((spec.height, spec.width, spec.channels), |(y, x, _)| {
        let arg = std::f32::consts::TAU * (fx * x as f32 / w + fy * y as f32 / h) + phase;
        spec.scene_contrast * (0.5 + 0.5 * arg.sin())
    })
}

struct Item {
    verb: usize,
    object: usize,
    test: bool,
}

fn render_clip(
    spec: &SynthSpec,
    item: &Item,
    base_objects: &[usize],
    index: usize,
) -> (Clip, Vec<CropBox>) {
    let mut rng = SeededRng::new(spec.seed, 0x5359_4e54).derive(&[index as u64]);
    let [t_len, h, w, c] = spec.shape();
    let mut data = Array4::<f32>::zeros((t_len, h, w, c));
    if spec.scene_contrast > 0.0 {
        let scene = scene_pattern(spec, item.object);
        for mut frame in data.outer_iter_mut() {
            frame.assign(&scene);
        }
    }
    let mut distractors = Vec::new();
    for _ in 0..spec.distractors {
        let pick = base_objects[rng.gen_range(0..base_objects.len())];
        let obj = Appearance::from_index(if spec.context_distractors {
            item.object
        } else {
            pick
        });
        let p = Placement {
            cx: rng.gen_range(0.0..w as f32),
            cy: rng.gen_range(0.0..h as f32),
            radius: rng.gen_range(1.5..2.5),
            intensity: rng.gen_range(0.25..0.5),
        };
        distractors.push((obj, p));
    }
    let start = Placement {
        cx: rng.gen_range(0.0..w as f32),
        cy: rng.gen_range(0.0..h as f32),
        radius: rng.gen_range(2.5..4.0),
        intensity: rng.gen_range(0.6..1.0),
    };
    let verb = Verb::from_index(item.verb);
    let obj = Appearance::from_index(item.object);
    let mut boxes = Vec::new();
    for t in 0..t_len {
        for (d, p) in &distractors {
            paint(&mut data, t, *d, p);
        }
        let p = start.at(verb, t, t_len);
        if let Some([x1, y1, x2, y2]) = paint(&mut data, t, obj, &p) {
            boxes.push(CropBox {
                frame: t,
                x1: x1 as f32,
                y1: y1 as f32,
                x2: (x2 + 1) as f32,
                y2: (y2 + 1) as f32,
                kind: BoxKind::Object,
            });
        }
        if spec.hand {
            let hand = Placement {
                cx: p.cx + p.radius + 1.5,
                cy: p.cy + 1.0,
                radius: 1.0,
                intensity: 0.5,
            };
            if let Some([x1, y1, x2, y2]) = paint(
                &mut data,
                t,
                Appearance {
                    shape: 0,
                    texture: 0,
                },
                &hand,
            ) {
                boxes.push(CropBox {
                    frame: t,
                    x1: x1 as f32,
                    y1: y1 as f32,
                    x2: (x2 + 1) as f32,
                    y2: (y2 + 1) as f32,
                    kind: BoxKind::Hand,
                });
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise).expect("valid sigma");
        data.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    (Clip::from_clamped(data), boxes)
}

/// Deterministic dataset for `spec`, with its designated base/novel split.
pub fn gen_synthetic_dataset(spec: &SynthSpec) -> Result<SynthDataset, BenchError> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed, 0x5359_4e00);
    let mut objects: Vec<usize> = (0..spec.num_objects).collect();
    objects.shuffle(&mut rng);
    let (novel, base) = objects.split_at(spec.num_novel);
    let mut base = base.to_vec();
    base.sort_unstable();
    let mut novel = novel.to_vec();
    novel.sort_unstable();
    let mut verb_order: Vec<usize> = (0..spec.num_verbs).collect();
    verb_order.shuffle(&mut rng);

    let n_train = ((spec.clips_per_composition as f64) * spec.train_ratio).round() as usize;
    let n_train = n_train.clamp(1, spec.clips_per_composition - 1);
    let mut items = Vec::new();
    for (j, &o) in base.iter().enumerate() {
        for i in 0..spec.verbs_per_base_object {
            let verb = verb_order[(j + i) % spec.num_verbs];
            for k in 0..spec.clips_per_composition {
                items.push(Item {
                    verb,
                    object: o,
                    test: k >= n_train,
                });
            }
        }
    }
    for &o in &novel {
        for verb in 0..spec.num_verbs {
            for _ in 0..spec.novel_clips_per_composition {
                items.push(Item {
                    verb,
                    object: o,
                    test: true,
                });
            }
        }
    }

    let vocab = LabelVocab {
        verbs: VERB_NAMES[..spec.num_verbs]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        objects: (0..spec.num_objects)
            .map(|o| Appearance::from_index(o).name())
            .collect(),
    };
    let mut clips = Vec::with_capacity(items.len());
    let mut rows = Vec::with_capacity(items.len());
    let mut split = SplitSpec {
        seed: spec.seed,
        attempt: 0,
        base_objects: base.iter().map(|&o| vocab.objects[o].clone()).collect(),
        novel_objects: novel.iter().map(|&o| vocab.objects[o].clone()).collect(),
        train: Vec::new(),
        test: Vec::new(),
        provenance: BTreeMap::new(),
    };
    for name in &vocab.objects {
        split
            .provenance
            .insert(name.clone(), Provenance::Designated);
    }
    for (i, item) in items.iter().enumerate() {
        let (clip, boxes) = render_clip(spec, item, &base, i);
        let segment_id = format!("s{i:05}");
        if item.test {
            split.test.push(segment_id.clone());
        } else {
            split.train.push(segment_id.clone());
        }
        rows.push(AnnotationRow {
            segment_id,
            video_id: format!("v{i:05}"),
            verb: vocab.verbs[item.verb].clone(),
            object: vocab.objects[item.object].clone(),
            boxes,
        });
        clips.push(clip);
    }
    let table = AnnotationTable::new(rows, Some(&vocab))?.with_boxes_column(true);
    Ok(SynthDataset {
        clips,
        table,
        split,
    })
}

const CLIP_MAGIC: &[u8; 4] = b"CLP1";

/// Clip store: `"CLP1"`, u32 count, u32 T, H, W, C, then every clip's
/// values as little-endian f32.
pub fn write_clips(path: &Path, clips: &[Clip]) -> Result<(), BenchError> {
    let shape = clips.first().map_or([0; 4], Clip::shape);
    let mut out = Vec::with_capacity(24 + clips.len() * shape.iter().product::<usize>() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&(clips.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for c in clips {
        if c.shape() != shape {
            return Err(BenchError::SpecInvalid(
                "clips in one store must share a shape".into(),
            ));
        }
        for v in c.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_clips(path: &Path) -> Result<Vec<Clip>, BenchError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| BenchError::SpecInvalid(format!("clip store {}: {m}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != CLIP_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |i: usize| {
        u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize
    };
    let count = word(4);
    let shape = [word(8), word(12), word(16), word(20)];
    let len: usize = shape.iter().product();
    if bytes.len() != 24 + count * len * 4 {
        return Err(bad("size does not match header"));
    }
    let mut clips = Vec::with_capacity(count);
    for k in 0..count {
        let start = 24 + k * len * 4;
        let vals: Vec<f32> = bytes[start..start + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), vals)
            .map_err(|e| bad(&e.to_string()))?;
        clips.push(Clip::new(data).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(clips)
}
