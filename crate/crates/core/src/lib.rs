//! Core library for a KAN/state-space U-Net segmentation model.
//!
//! Everything is generic over the [`Scalar`] floating type: `f32` for
//! training speed, `f64` for gradient verification. The concrete aliases
//! at the crate root are what most call sites want.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod model;
pub mod ops;
pub mod params;
pub mod pnm;
pub mod s6;
pub mod scalar;
pub mod train;
pub mod scan;
pub mod sem;
pub mod tape;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamVars, Params};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
