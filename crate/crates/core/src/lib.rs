//! Degradation-adaptive image restoration on a small self-contained tensor
//! engine.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). Training and
//! the command-line tool run in `f32`; the `f64` instantiation exists so
//! gradient checks can be made far below single-precision noise.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod expert;
pub mod gating;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{backward, Grads, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Real;
pub use spectral::Spectrum;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
