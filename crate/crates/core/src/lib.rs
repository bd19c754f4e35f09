//! Desk-scale video inpainting engine built on learnable gated temporal
//! shift modules: a small tensor/autograd core, the shift and gating layers,
//! the generator/discriminator pair, the loss suite, free-form mask
//! synthesis, frame I/O, and the two-stage training loop.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod maskgen;
pub mod modules;
pub mod networks;
pub mod parallel;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, TensorData};
