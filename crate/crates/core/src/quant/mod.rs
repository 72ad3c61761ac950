//! Uniform asymmetric quantization: parameters, tensor ops, simulated
//! quantized execution and the quantized model file.

pub mod affine;
pub mod format;
pub mod model;

pub use affine::{
    compute_params, dequantize, fake_quantize, quantize, quantize_per_channel, CalibRange,
    Granularity, QuantParams, QuantizedTensor,
};
pub use format::{load_quantized, save_quantized};
pub use model::{forward_quantized, quantize_model, weight_id, QuantizedModel, SiteId, WeightRange};
