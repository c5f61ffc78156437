//! Binary neural network training and bit-packed inference.

pub mod augment;
pub mod autograd;
pub mod binarize;
pub mod block;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod model;
pub mod normalize;
pub mod packed;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
