//! Minimal reverse-mode autodiff for convolutional networks.
//!
//! Everything is generic over [`Real`] (implemented for `f32` and `f64`). The
//! heavy lifting in convolutions and dense layers is delegated to
//! `ndarray::linalg::general_mat_mul`, which dispatches to an optimized GEMM
//! for both float widths. Execution is single-threaded and deterministic:
//! identical inputs and parameters give bit-identical outputs and gradients.

pub mod archive;
mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

pub use archive::{Archive, ArchiveError};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Floating point scalar the networks and numerical kernels run on.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + for<'a> Sum<&'a Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag written into serialized headers.
    const DTYPE: &'static str;
    /// Byte width of one value on disk.
    const BYTES: usize;

    fn cast<U: ToPrimitive>(x: U) -> Self {
        <Self as NumCast>::from(x).expect("value representable in target float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
