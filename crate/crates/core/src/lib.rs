//! Cross-domain infrared small target detection: a small reverse-mode tensor
//! engine, frequency-domain phase rectification, orthogonal skip attention,
//! selective style recomposition, IRSTD metrics and a synthetic multi-domain
//! scene generator.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common instantiations.

pub mod error;
pub mod image;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod spectral;
pub mod style;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model32 = network::S2cpModel<f32>;
pub type Model64 = network::S2cpModel<f64>;
