//! Zero-shot quantization toolkit.
//!
//! Synthesizes calibration batches by matching a model's stored batch-norm
//! statistics, selects clipping ranges (min/max, percentile, entropy) and
//! simulates 8-bit affine quantization of weights and activations.

pub mod calibration;
mod container;
pub mod distill;
pub mod error;
pub mod forward;
pub mod graph;
pub mod model_io;
mod ops;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use container::write_atomic;
pub use error::{Error, ErrorClass, Result};
pub use forward::{forward, grad_input, ActivationTrace, Objective};
pub use graph::{BatchNorm2d, Conv2d, Layer, Linear, ModelGraph, Pool};
pub use scalar::Real;
pub use tensor::{batch_stats, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ModelF32 = ModelGraph<f32>;
pub type ModelF64 = ModelGraph<f64>;
