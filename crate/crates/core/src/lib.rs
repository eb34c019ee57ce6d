//! Speaker role identification for air traffic control radio.
//!
//! A small reverse-mode autodiff engine, speech and text front ends, the
//! model zoo with its pooling and fusion layers, a synthetic corpus
//! generator and the training and evaluation loop.

#![allow(clippy::type_complexity)]

pub mod audio;
pub mod autodiff;
pub mod nn;
pub mod params;
pub mod pooling;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Gradients, Tape, TensorError, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
