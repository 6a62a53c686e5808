//! Joint reconstruction of shape, materials, per-image illumination and
//! camera poses from an image collection with only coarse quadrant pose
//! annotations, on a single CPU.
//!
//! The numerical core is generic over the scalar type (f32/f64); the
//! concrete aliases below are what the trainer and CLI use.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{InvrenderError, Result};

/// Default scalar for training and tests.
pub type Scalar = f64;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub mod cli;

pub mod cameras;
pub mod encoding;
pub mod field;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod scenegen;
