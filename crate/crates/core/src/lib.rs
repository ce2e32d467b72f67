//! Ambient lighting normalization with a Retinex-style dual-branch network.
//!
//! The crate covers the full experiment stack: colour-space guidance maps,
//! the Haar wavelet stream, the attention blocks, Retinex decomposition, the
//! restoration network itself, a synthetic multi-coloured-light dataset,
//! restoration metrics and the training recipe. Everything runs on CPU in
//! `f64` on top of a small reverse-mode differentiation engine
//! ([`autograd`]).

pub mod attention;
pub mod autograd;
pub mod colorspace;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod retinex;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::ImagePlane;
pub use model::{ContextBackbone, Fusion, Guidance, Model, ModelConfig, Variant};
pub use tensor::Tensor;
