//! Minimal tensor and reverse-mode autodiff engine backing the networks.

pub mod adam;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Grads, PatchCoord, Tape, Var};
pub use tensor::{Shape, Tensor};
