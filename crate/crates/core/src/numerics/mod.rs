//! Numeric substrate shared by every gradient-bearing module: vector
//! helpers, stable reductions, the Adam optimizer, learning-rate schedules,
//! counter-based random streams and a central-difference gradient oracle.

mod adam;
mod gradcheck;
mod rng;
mod schedule;

use std::fmt::{Debug, Display};

use ndarray::{Array1, Array2, ArrayView1, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
pub use rng::SeededRng;
pub use schedule::{LrSchedule, ScheduleMode};

/// Norms at or below this are treated as zero by [`normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub type Vector<F = f64> = Array1<F>;
pub type Matrix<F = f64> = Array2<F>;

/// Floating types the trainable models are generic over: `f32` for training
/// loops, `f64` for gradient checks.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("cannot normalize a vector with norm {0:e}")]
    ZeroVector(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("objective is not finite at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
}

pub fn norm<F: Real>(v: ArrayView1<'_, F>) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Scale `v` onto the unit sphere.
pub fn normalize<F: Real>(v: ArrayView1<'_, F>) -> Result<Vector<F>, NumericsError> {
    let n = norm(v);
    if !(n.as_f64() > NORM_EPS) {
        return Err(NumericsError::ZeroVector(n.as_f64()));
    }
    Ok(v.mapv(|x| x / n))
}

/// Row-wise [`normalize`]; returns the normalized rows and the original norms.
pub fn normalize_rows<F: Real>(m: &Matrix<F>) -> Result<(Matrix<F>, Vector<F>), NumericsError> {
    let mut out = m.clone();
    let mut norms = Vector::zeros(m.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(row.view());
        if !(n.as_f64() > NORM_EPS) {
            return Err(NumericsError::ZeroVector(n.as_f64()));
        }
        row.mapv_inplace(|x| x / n);
        norms[i] = n;
    }
    Ok((out, norms))
}

/// `log Σ exp(x)`, shifted by the maximum so large logits do not overflow.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64, NumericsError> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.max(x)))
        })
        .ok_or(NumericsError::EmptyInput)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax with the same max shift as [`log_sum_exp`].
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of `z = v / ‖v‖`: maps `dL/dz` to `dL/dv`.
///
/// The Jacobian is `(I − z zᵀ) / ‖v‖`, so any upstream component along `z`
/// is annihilated.
pub fn normalize_vjp<F: Real>(
    z: ArrayView1<'_, F>,
    v_norm: F,
    upstream: ArrayView1<'_, F>,
) -> Vector<F> {
    let radial = z.dot(&upstream);
    let mut out = upstream.to_owned();
    out.zip_mut_with(&z, |g, &zi| *g = (*g - radial * zi) / v_norm);
    out
}
