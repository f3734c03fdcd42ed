//! Progressive, position-based vision-token pruning inside a causal
//! multimodal decoder, with the schedule math, cost model and training
//! pieces built around it.

pub mod baselines;
pub mod costmodel;
pub mod decoder;
pub mod error;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Decoder64 = decoder::Decoder<f64>;
pub type Decoder32 = decoder::Decoder<f32>;
