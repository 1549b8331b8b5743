//! Conditional normalizing flow over pose vectors.
//!
//! Each flow step is actnorm, then an LU-parameterized invertible linear
//! map, then an affine coupling layer whose scale and shift networks see
//! the untouched half of the vector and a per-frame conditioning vector.
//! The conditioning vector comes from a single recurrent (GRU) encoder
//! shared by all steps; it consumes the pose history and a window of
//! speech features and carries its hidden state from frame to frame.
//!
//! Everything is generic over [`Real`] so a trained model can be evaluated
//! in single precision. Gradients are computed by hand-written reverse mode.

mod actnorm;
mod coupling;
mod encoder;
mod linear;
mod model;
mod step;

pub use actnorm::ActNorm;
pub use coupling::Coupling;
pub use encoder::{ConditioningEncoder, GruCache};
pub use linear::InvertibleLinear;
pub use model::{encoder_input, Chunk, FlowModel};
pub use step::FlowStep;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Sum + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    /// Widening to `f64`; every `Real` value is representable.
    fn w(self) -> f64 {
        self.to_f64().expect("f32 and f64 widen losslessly")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("non-finite value in flow step {step} ({stage})")]
    NonFinite { step: usize, stage: &'static str },
    #[error("non-finite value in the conditioning encoder")]
    NonFiniteEncoder,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("actnorm initialization needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid flow configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Number of flow steps.
    pub steps: usize,
    /// Pose dimension. Zero means "take it from the data".
    pub pose_dim: usize,
    pub cond_dim: usize,
    pub hidden_size: usize,
    pub coupling_hidden: usize,
    /// Bound on the coupling log-scale.
    pub s_max: f64,
    /// Pose history length `H` in frames.
    pub history: usize,
    /// Speech context half-width `w`; the window covers `2w + 1` frames.
    pub context: usize,
    /// Speech feature width. Zero means "take it from the data".
    pub mel_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            pose_dim: 0,
            cond_dim: 128,
            hidden_size: 128,
            coupling_hidden: 128,
            s_max: 3.0,
            history: 10,
            context: 5,
            mel_dim: 0,
        }
    }
}

impl FlowConfig {
    /// Small profile used by unit tests.
    pub fn test_profile(pose_dim: usize, mel_dim: usize) -> Self {
        Self {
            steps: 2,
            pose_dim,
            cond_dim: 16,
            hidden_size: 16,
            coupling_hidden: 16,
            s_max: 3.0,
            history: 2,
            context: 1,
            mel_dim,
        }
    }

    /// Width of the per-frame encoder input: `H` poses then `2w + 1` speech frames.
    pub fn encoder_input_dim(&self) -> usize {
        self.history * self.pose_dim + (2 * self.context + 1) * self.mel_dim
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.pose_dim < 2 {
            return Err(FlowError::Config(format!("pose_dim {} < 2", self.pose_dim)));
        }
        if self.mel_dim == 0 {
            return Err(FlowError::Config("mel_dim must be positive".into()));
        }
        if self.history == 0 {
            return Err(FlowError::Config("history must be at least one frame".into()));
        }
        if self.steps == 0 || self.cond_dim == 0 || self.hidden_size == 0 || self.coupling_hidden == 0 {
            return Err(FlowError::Config("all sizes must be positive".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(FlowError::Config("s_max must be positive".into()));
        }
        Ok(())
    }
}

/// `out = W x` for row-major `W` of shape `(out.len(), x.len())`.
pub(crate) fn matvec<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `dx += W^T dy`.
pub(crate) fn matvec_t_acc<T: Real>(w: &[T], dy: &[T], dx: &mut [T]) {
    let cols = dx.len();
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g == T::zero() {
            continue;
        }
        for (d, &a) in dx.iter_mut().zip(row) {
            *d = *d + g * a;
        }
    }
}

/// `dw += dy x^T`.
pub(crate) fn outer_acc<T: Real>(dw: &mut [T], dy: &[T], x: &[T]) {
    let cols = x.len();
    for (&g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if g == T::zero() {
            continue;
        }
        for (d, &a) in row.iter_mut().zip(x) {
            *d = *d + g * a;
        }
    }
}

pub(crate) fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn cast_vec<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::c(x.to_f64().unwrap_or(f64::NAN))).collect()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
