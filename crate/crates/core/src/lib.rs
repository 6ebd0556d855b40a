//! Exact entmax-1.5 sparse attention inside a small Vision Transformer, and
//! the tools used to study its dense features: point-in-box, CLS–patch
//! similarity, PCA-RGB renderings and linear probes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The `*64`
//! aliases below are what the CLI and the acceptance suite use.

pub mod acceptance;
pub mod analysis;
pub mod attention;
pub mod data;
mod error;
pub mod image;
pub mod normalizers;
pub mod numerics;
mod scalar;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type VitModel64 = vit::VitModel<f64>;
pub type VitModel32 = vit::VitModel<f32>;
pub type LayerFeatures64 = vit::LayerFeatures<f64>;
pub type NormalizerResult64 = normalizers::NormalizerResult<f64>;
