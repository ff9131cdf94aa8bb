//! Stain-style enhancement of dark-field microscopy images.
//!
//! The crate is generic over the floating point type; the aliases below fix
//! it to `f32` for training and inference and `f64` for gradient checks.

pub mod enhance;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use image::{GrayImage, ImageF};
pub use scalar::Scalar;

pub type ImageF32 = ImageF<f32>;
pub type ImageF64 = ImageF<f64>;
pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type Teacher32 = networks::Teacher<f32>;
pub type Critics32 = networks::DiscriminatorPair<f32>;
pub type Embedder32 = networks::PerceptualEmbedder<f32>;
