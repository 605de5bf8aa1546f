//! Spectral super-resolution at desk scale: recover a B-band hyperspectral
//! cube from a 3-channel RGB image.
//!
//! The crate bundles a from-scratch reverse-mode tensor engine, the neural
//! building blocks (convolution, PReLU, channel attention, multi-head
//! self-attention), SLIC superpixel segmentation for the semantic prior,
//! the network itself, a covariance-constrained training objective, a
//! five-metric evaluation suite, synthetic data generation and all file
//! formats.
//!
//! Everything numeric is generic over the scalar type (`f32` for training,
//! `f64` for gradient checking); concrete aliases live at the crate root.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod slic;
pub mod tensor;
pub mod train;

pub use error::{HprnError, Result};
pub use scalar::Scalar;
pub use tensor::{Axis, Shape, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor (finite-difference headroom).
pub type Tensor64 = Tensor<f64>;

pub type SpectralCube32 = data::SpectralCube<f32>;
pub type SpectralCube64 = data::SpectralCube<f64>;

/// Wavelength span covered by the default cube layout, in nanometres.
pub const DEFAULT_WAVELENGTH_RANGE_NM: (f64, f64) = (400.0, 700.0);
/// Default number of spectral bands.
pub const DEFAULT_BANDS: usize = 31;
