//! Alternate diverse mean-teacher (AD-MT) semi-supervised segmentation.
//!
//! The numeric core ([`tensor`], [`tape`], [`model`], [`admt`]) is generic
//! over the scalar type through [`Real`]; the aliases below pin the `f64`
//! instantiation used by training and the command-line tools.

pub mod admt;
pub mod augment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelParams, SegModel};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Params64 = ModelParams<f64>;
