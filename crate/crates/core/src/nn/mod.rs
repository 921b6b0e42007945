//! A deliberately small reverse-mode autodiff engine.
//!
//! [`ops`] holds the numeric kernels (forward and adjoint) for every layer the
//! network uses; [`Tape`] records a forward pass over batched `N×C×H×W` tensors
//! and replays it backward; [`ParamStore`] owns named parameters, running
//! statistics and the checkpoint format.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64`
//! while training runs in `f32`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub mod ops;
mod params;
mod tape;

pub use params::{ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{BatchStats, Gradients, Tape, Var};

/// Floating-point element type of tensors.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A batch of feature maps, laid out `N×C×H×W`.
pub type FeatureMap<T> = ndarray::Array4<T>;

/// Whether batch normalisation uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;
