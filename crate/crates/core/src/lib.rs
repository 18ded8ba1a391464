//! Morphology-guided diffusion for slice-stack super-resolution.

pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod planes;
pub mod recon;
pub mod segmentation;
pub mod unet;
pub mod volume;

pub use dmcvr_nn::Real;
pub use error::{Error, Result};

/// Single-precision models, the pipeline's working type.
pub type DiffusionModelF32 = encoders::DiffusionModel<f32>;
pub type SegModelF32 = segmentation::SegModel<f32>;
pub type VolumeF32 = volume::Volume<f32>;
pub type SliceStackF32 = volume::SliceStack<f32>;

/// Double-precision variants, used for numerical checks.
pub type DiffusionModelF64 = encoders::DiffusionModel<f64>;
pub type SegModelF64 = segmentation::SegModel<f64>;
pub type VolumeF64 = volume::Volume<f64>;
pub type SliceStackF64 = volume::SliceStack<f64>;
