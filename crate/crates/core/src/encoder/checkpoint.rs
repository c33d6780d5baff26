//! Binary checkpoint: `"OAPC"`, u16 version, input geometry (four u32 and
//! a u8 flag byte), u32 layer count, then per layer `{kind u8, out u32,
//! in u32}`, then every layer's weights (row-major) and bias as
//! little-endian f32 in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use super::{Classifier, Encoder, EncoderError, InputSpec, Linear, Projection};
use crate::numerics::{Matrix, Vector};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"OAPC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Hidden = 0,
    Projection = 1,
    Classifier = 2,
}

impl LayerKind {
    fn from_code(c: u8) -> Result<Self, EncoderError> {
        match c {
            0 => Ok(Self::Hidden),
            1 => Ok(Self::Projection),
            2 => Ok(Self::Classifier),
            _ => Err(EncoderError::Checkpoint(format!("unknown layer kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub input: InputSpec,
    pub layers: Vec<(LayerKind, Linear<f32>)>,
}

impl Checkpoint {
    pub fn from_models(
        encoder: &Encoder<f32>,
        projection: Option<&Projection<f32>>,
        classifier: Option<&Classifier<f32>>,
    ) -> Self {
        let mut layers: Vec<_> = encoder
            .layers()
            .iter()
            .map(|l| (LayerKind::Hidden, l.clone()))
            .collect();
        layers.extend(projection.map(|p| (LayerKind::Projection, p.layer().clone())));
        layers.extend(classifier.map(|c| (LayerKind::Classifier, c.layer().clone())));
        Self {
            input: *encoder.input(),
            layers,
        }
    }

    fn of_kind(&self, kind: LayerKind) -> impl Iterator<Item = &Linear<f32>> {
        self.layers
            .iter()
            .filter(move |(k, _)| *k == kind)
            .map(|(_, l)| l)
    }

    pub fn encoder(&self) -> Result<Encoder<f32>, EncoderError> {
        Encoder::from_layers(
            self.input,
            self.of_kind(LayerKind::Hidden).cloned().collect(),
        )
    }

    pub fn projection(&self) -> Option<Projection<f32>> {
        self.of_kind(LayerKind::Projection)
            .next()
            .cloned()
            .map(Projection::from_layer)
    }

    pub fn classifier(&self) -> Option<Classifier<f32>> {
        self.of_kind(LayerKind::Classifier)
            .next()
            .cloned()
            .map(Classifier::from_layer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let i = &self.input;
        for d in [i.frames, i.height, i.width, i.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(i.diff_channel));
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (kind, l) in &self.layers {
            out.push(*kind as u8);
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        }
        for (_, l) in &self.layers {
            for t in l.tensors() {
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(EncoderError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut r)?) as usize;
        }
        let [flags] = take::<1>(&mut r)?;
        let input = InputSpec {
            frames: dims[0],
            height: dims[1],
            width: dims[2],
            channels: dims[3],
            diff_channel: flags & 1 == 1,
        };
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let [kind] = take::<1>(&mut r)?;
            let out = u32::from_le_bytes(take(&mut r)?) as usize;
            let inp = u32::from_le_bytes(take(&mut r)?) as usize;
            shapes.push((LayerKind::from_code(kind)?, out, inp));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (kind, out, inp) in shapes {
            let weight = Matrix::from_shape_vec((out, inp), read_f32s(&mut r, out * inp)?)
                .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
            let bias = Vector::from_vec(read_f32s(&mut r, out)?);
            layers.push((kind, Linear { weight, bias }));
        }
        if !r.is_empty() {
            return Err(EncoderError::Checkpoint(format!(
                "{} trailing bytes",
                r.len()
            )));
        }
        Ok(Self { input, layers })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), EncoderError> {
    r.read_exact(buf)
        .map_err(|_| EncoderError::Checkpoint("truncated file".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], EncoderError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f32>, EncoderError> {
    if r.len() < n * 4 {
        return Err(EncoderError::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n * 4);
    *r = tail;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), EncoderError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, EncoderError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
