//! Scalar abstraction over `f32`/`f64`.
//!
//! Training runs on `f32` for speed; numeric oracles and gradient checks
//! instantiate the same code at `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element width tag used by the binary array container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating scalar usable in tensors, networks, and the optimizer.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
