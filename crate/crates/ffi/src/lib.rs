//! C ABI over the ovrec numerical core.
//!
//! Every fallible call returns an [`OvrecStatus`]; on failure the message is
//! available from [`ovrec_last_error`] on the same thread until the next
//! failing call. Arrays are dense row-major buffers whose lengths follow from
//! the shape arguments; output buffers are caller-allocated. Handles are
//! opaque and must be released with their `_free` function.
//!
//! Row origins in contrastive batches are encoded as `int64_t`:
//! [`OVREC_ORIGIN_VIEW`], [`OVREC_ORIGIN_QUEUE`], or the non-negative row
//! index of the view a guiding augmentation belongs to.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::{Array2, Array4};
use ovrec::augment::{object_mix, temporal_gradient, Clip};
use ovrec::bench::hm;
use ovrec::contrastive::{
    build_positive_bags, loss_in, loss_out, total_loss, DenominatorPolicy, EmbeddingBatch,
    LossConfig, MemoryQueue, Origin,
};
use ovrec::prompt::{ensemble, read_emb, EmbTable, EnsembleConfig};

pub const OVREC_ORIGIN_VIEW: i64 = -1;
pub const OVREC_ORIGIN_QUEUE: i64 = -2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    NotFound = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvrecLossKind {
    /// Positive average outside the log.
    Out = 0,
    /// Guiding-bag average inside the log.
    In = 1,
    /// `Out + lambda * In`.
    Total = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvrecDenominator {
    IncludeGuides = 0,
    ExcludeGuides = 1,
}

/// FIFO cache of unit embeddings and verb labels.
pub struct OvrecQueue(MemoryQueue);

/// Named embedding table loaded from an EMB1 file.
pub struct OvrecEmbTable(EmbTable);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(OvrecStatus, String);

impl Failure {
    fn new(status: OvrecStatus, msg: impl ToString) -> Self {
        Self(status, msg.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OvrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OvrecStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside ovrec");
            OvrecStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(
            OvrecStatus::NullPointer,
            format!("`{name}` is null"),
        ));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(
            OvrecStatus::NullPointer,
            format!("`{name}` is null"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(
            OvrecStatus::NullPointer,
            format!("`{name}` is null"),
        ));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure::new(
            OvrecStatus::InvalidArgument,
            format!("`{name}` is not UTF-8"),
        )
    })
}

fn shape_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Failure::new(OvrecStatus::InvalidArgument, "shape overflows usize"))
}

fn decode_origins(raw: &[i64]) -> Result<Vec<Origin>, Failure> {
    raw.iter()
        .map(|&o| match o {
            OVREC_ORIGIN_VIEW => Ok(Origin::View),
            OVREC_ORIGIN_QUEUE => Ok(Origin::Queue),
            a if a >= 0 => Ok(Origin::Guide { anchor: a as usize }),
            other => Err(Failure::new(
                OvrecStatus::InvalidArgument,
                format!("unknown origin code {other}"),
            )),
        })
        .collect()
}

unsafe fn matrix(z: *const f64, rows: usize, dim: usize) -> Result<Array2<f64>, Failure> {
    let data = input(z, shape_len(&[rows, dim])?, "z")?;
    Ok(Array2::from_shape_vec((rows, dim), data.to_vec()).expect("length matches shape"))
}

unsafe fn clip(data: *const f32, shape: [usize; 4], name: &str) -> Result<Clip, Failure> {
    let values = input(data, shape_len(&shape)?, name)?;
    let arr = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values.to_vec())
        .expect("length matches");
    Clip::new(arr).map_err(|e| Failure::new(OvrecStatus::InvalidArgument, e))
}

fn invalid(e: impl ToString) -> Failure {
    Failure::new(OvrecStatus::InvalidArgument, e)
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ovrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Contrastive loss over `rows` unit embeddings of width `dim`.
///
/// Writes the mean loss to `value` and `∂value/∂z` (`rows × dim`) to `grad`.
///
/// # Safety
/// `z` and `grad` must hold `rows * dim` values, `verbs` and `origins` must
/// hold `rows` values, and `value` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ovrec_contrastive_loss(
    z: *const f64,
    rows: usize,
    dim: usize,
    verbs: *const usize,
    origins: *const i64,
    kind: OvrecLossKind,
    tau_out: f64,
    tau_in: f64,
    lambda: f64,
    denominator: OvrecDenominator,
    value: *mut f64,
    grad: *mut f64,
) -> OvrecStatus {
    guard(|| {
        let z = matrix(z, rows, dim)?;
        let verbs = input(verbs, rows, "verbs")?.to_vec();
        let origins = decode_origins(input(origins, rows, "origins")?)?;
        let value = value
            .as_mut()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`value` is null"))?;
        let grad = output(grad, rows * dim, "grad")?;
        let policy = match denominator {
            OvrecDenominator::IncludeGuides => DenominatorPolicy::IncludeGuides,
            OvrecDenominator::ExcludeGuides => DenominatorPolicy::ExcludeGuides,
        };
        let cfg = LossConfig {
            tau_out,
            tau_in,
            lambda,
            policy,
        };
        cfg.validate().map_err(invalid)?;
        let batch = EmbeddingBatch::new(z, verbs, origins).map_err(invalid)?;
        let bags = build_positive_bags(&batch);
        let out = match kind {
            OvrecLossKind::Out => loss_out(&batch, &bags, &cfg),
            OvrecLossKind::In => loss_in(&batch, &bags, &cfg),
            OvrecLossKind::Total => total_loss(&batch, &bags, &cfg),
        }
        .map_err(invalid)?;
        *value = out.value;
        grad.iter_mut()
            .zip(out.grad.iter())
            .for_each(|(g, &v)| *g = v);
        Ok(())
    })
}

/// Rescaled absolute frame difference of a `T×H×W×C` clip, frame 0 zero.
///
/// # Safety
/// `clip_data` and `out` must each hold `frames * height * width * channels`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ovrec_temporal_gradient(
    clip_data: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f32,
) -> OvrecStatus {
    guard(|| {
        let shape = [frames, height, width, channels];
        let x = clip(clip_data, shape, "clip")?;
        let g = temporal_gradient(&x).map_err(invalid)?;
        let dst = output(out, shape_len(&shape)?, "out")?;
        dst.iter_mut()
            .zip(g.data().iter())
            .for_each(|(d, &v)| *d = v);
        Ok(())
    })
}

/// Mixes the moving region of `a` with the static region of `b`.
///
/// # Safety
/// `a`, `b` and `out` must each hold `frames * height * width * channels`
/// values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ovrec_object_mix(
    a: *const f32,
    b: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    alpha: f32,
    out: *mut f32,
) -> OvrecStatus {
    guard(|| {
        let shape = [frames, height, width, channels];
        let (xa, xb) = (clip(a, shape, "a")?, clip(b, shape, "b")?);
        let mixed = object_mix(&xa, &xb, alpha).map_err(invalid)?;
        let dst = output(out, shape_len(&shape)?, "out")?;
        dst.iter_mut()
            .zip(mixed.data().iter())
            .for_each(|(d, &v)| *d = v);
        Ok(())
    })
}

/// Harmonic mean of two accuracies; 0 when both are 0.
#[no_mangle]
pub extern "C" fn ovrec_hm(a: f64, b: f64) -> f64 {
    hm(a, b)
}

/// Blends a base-tuned and a novel-tuned class distribution, weighting each
/// model by `gamma` on its own classes.
///
/// # Safety
/// `p_base`, `p_novel`, `is_novel` and `out` must each hold `classes` values.
#[no_mangle]
pub unsafe extern "C" fn ovrec_ensemble(
    p_base: *const f64,
    p_novel: *const f64,
    is_novel: *const bool,
    classes: usize,
    gamma: f64,
    out: *mut f64,
) -> OvrecStatus {
    guard(|| {
        let pb = input(p_base, classes, "p_base")?;
        let pn = input(p_novel, classes, "p_novel")?;
        let novel = input(is_novel, classes, "is_novel")?.to_vec();
        let dst = output(out, classes, "out")?;
        let cfg = EnsembleConfig::new(gamma, novel).map_err(invalid)?;
        let p = ensemble(pb, pn, &cfg).map_err(invalid)?;
        dst.copy_from_slice(p.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Creates an empty queue holding at most `capacity` rows.
#[no_mangle]
pub extern "C" fn ovrec_queue_new(capacity: usize) -> *mut OvrecQueue {
    Box::into_raw(Box::new(OvrecQueue(MemoryQueue::new(capacity))))
}

/// # Safety
/// `queue` must come from [`ovrec_queue_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ovrec_queue_free(queue: *mut OvrecQueue) {
    if !queue.is_null() {
        drop(Box::from_raw(queue));
    }
}

/// Number of cached rows; 0 for a null handle.
///
/// # Safety
/// `queue` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ovrec_queue_len(queue: *const OvrecQueue) -> usize {
    queue.as_ref().map_or(0, |q| q.0.len())
}

/// Appends every non-guide row, evicting the oldest beyond capacity, and
/// writes the number of accepted rows to `accepted`.
///
/// # Safety
/// `queue` must be a live handle, `z` must hold `rows * dim` values, `verbs`
/// and `origins` must hold `rows` values, and `accepted` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ovrec_queue_update(
    queue: *mut OvrecQueue,
    z: *const f64,
    rows: usize,
    dim: usize,
    verbs: *const usize,
    origins: *const i64,
    accepted: *mut usize,
) -> OvrecStatus {
    guard(|| {
        let q = queue
            .as_mut()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`queue` is null"))?;
        let z = matrix(z, rows, dim)?;
        let verbs = input(verbs, rows, "verbs")?;
        let origins = decode_origins(input(origins, rows, "origins")?)?;
        let n = q.0.update(&z, verbs, &origins).map_err(invalid)?;
        if let Some(a) = accepted.as_mut() {
            *a = n;
        }
        Ok(())
    })
}

/// Copies row `index` (oldest first) into `embedding` (`dim` values) and its
/// verb label into `verb`.
///
/// # Safety
/// `queue` must be a live handle, `embedding` must hold `dim` values and
/// `verb` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovrec_queue_get(
    queue: *const OvrecQueue,
    index: usize,
    embedding: *mut f64,
    dim: usize,
    verb: *mut usize,
) -> OvrecStatus {
    guard(|| {
        let q = queue
            .as_ref()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`queue` is null"))?;
        let (row, v) = q.0.iter().nth(index).ok_or_else(|| {
            Failure::new(
                OvrecStatus::NotFound,
                format!("row {index} of {}", q.0.len()),
            )
        })?;
        if row.len() != dim {
            return Err(Failure::new(
                OvrecStatus::ShapeMismatch,
                format!("row has {} values, buffer {dim}", row.len()),
            ));
        }
        output(embedding, dim, "embedding")?.copy_from_slice(row);
        *verb
            .as_mut()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`verb` is null"))? = v;
        Ok(())
    })
}

/// Loads an EMB1 file into a new handle written to `table`.
///
/// # Safety
/// `path` must be a nul-terminated string and `table` writable.
#[no_mangle]
pub unsafe extern "C" fn ovrec_emb_open(
    path: *const c_char,
    table: *mut *mut OvrecEmbTable,
) -> OvrecStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let slot = table
            .as_mut()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`table` is null"))?;
        let t = read_emb(Path::new(path)).map_err(|e| match e {
            ovrec::prompt::PromptError::Io(_) => Failure::new(OvrecStatus::Io, e),
            _ => Failure::new(OvrecStatus::Format, e),
        })?;
        *slot = Box::into_raw(Box::new(OvrecEmbTable(t)));
        Ok(())
    })
}

/// # Safety
/// `table` must come from [`ovrec_emb_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ovrec_emb_free(table: *mut OvrecEmbTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ovrec_emb_dim(table: *const OvrecEmbTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.dim())
}

/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ovrec_emb_len(table: *const OvrecEmbTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the vector named `name` into `values` (`dim` floats).
///
/// # Safety
/// `table` must be a live handle, `name` a nul-terminated string and
/// `values` must hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn ovrec_emb_get(
    table: *const OvrecEmbTable,
    name: *const c_char,
    values: *mut f32,
    dim: usize,
) -> OvrecStatus {
    guard(|| {
        let t = table
            .as_ref()
            .ok_or_else(|| Failure::new(OvrecStatus::NullPointer, "`table` is null"))?;
        let name = c_str(name, "name")?;
        if dim != t.0.dim() {
            return Err(Failure::new(
                OvrecStatus::ShapeMismatch,
                format!("table dim {}, buffer {dim}", t.0.dim()),
            ));
        }
        let v = t.0.get(name).ok_or_else(|| {
            Failure::new(OvrecStatus::NotFound, format!("no record named `{name}`"))
        })?;
        output(values, dim, "values")?.copy_from_slice(v);
        Ok(())
    })
}
