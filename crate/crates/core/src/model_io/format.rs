//! `.zsq` full-precision model files.
//!
//! Header `ZSQM 1 <len>`, then a JSON manifest listing the input shape, each
//! layer's kind and hyperparameters, and blob references for every parameter
//! tensor, followed by the weight blob (little-endian `f32`, row-major, in
//! manifest order). `crc32` is the CRC-32 of the blob. Batch-norm statistics
//! are stored as mean and standard deviation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobReader, BlobRef, BlobWriter};
use crate::error::{Error, Result};
use crate::graph::{BatchNorm2d, Conv2d, Layer, Linear, ModelGraph, Pool};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "ZSQM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDescriptor {
    Conv2d {
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: BlobRef,
    },
    BatchNorm2d {
        eps: f32,
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_std: BlobRef,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        weight: BlobRef,
        bias: BlobRef,
    },
}

impl LayerDescriptor {
    pub fn blob_refs(&self) -> Vec<&BlobRef> {
        match self {
            LayerDescriptor::Conv2d { weight, bias, .. } | LayerDescriptor::Linear { weight, bias } => {
                vec![weight, bias]
            }
            LayerDescriptor::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_std,
                ..
            } => vec![gamma, beta, running_mean, running_std],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDescriptor>,
    pub blob_len: usize,
    pub crc32: u32,
}

fn push_vec<T: Real>(blob: &mut BlobWriter, v: &[T]) -> BlobRef {
    blob.push_f32(&[v.len()], v.iter().map(|x| x.as_f32()))
}

fn push_tensor<T: Real>(blob: &mut BlobWriter, t: &Tensor<T>) -> BlobRef {
    blob.push_f32(t.shape(), t.data().iter().map(|x| x.as_f32()))
}

pub(crate) fn describe_layer<T: Real>(layer: &Layer<T>, blob: &mut BlobWriter) -> LayerDescriptor {
    match layer {
        Layer::Conv2d(c) => LayerDescriptor::Conv2d {
            stride: c.stride,
            padding: c.padding,
            weight: push_tensor(blob, &c.weight),
            bias: push_vec(blob, &c.bias),
        },
        Layer::BatchNorm2d(bn) => LayerDescriptor::BatchNorm2d {
            eps: bn.eps.as_f32(),
            gamma: push_vec(blob, &bn.gamma),
            beta: push_vec(blob, &bn.beta),
            running_mean: push_vec(blob, &bn.running_mean),
            running_std: push_vec(blob, &bn.running_std),
        },
        Layer::Relu => LayerDescriptor::Relu,
        Layer::MaxPool2d(p) => LayerDescriptor::MaxPool2d {
            kernel: p.kernel,
            stride: p.stride,
        },
        Layer::AvgPool2d(p) => LayerDescriptor::AvgPool2d {
            kernel: p.kernel,
            stride: p.stride,
        },
        Layer::Flatten => LayerDescriptor::Flatten,
        Layer::Linear(l) => LayerDescriptor::Linear {
            weight: push_tensor(blob, &l.weight),
            bias: push_vec(blob, &l.bias),
        },
    }
}

/// Reconstructs a layer; `weight_override` supplies conv/linear weights that
/// are not stored as `f32` (quantized files).
pub(crate) fn rebuild_layer(
    desc: &LayerDescriptor,
    reader: &BlobReader<'_>,
    weight_override: Option<Tensor<f32>>,
) -> Result<Layer<f32>> {
    let tensor = |r: &BlobRef| -> Result<Tensor<f32>> {
        let data = reader.f32s(r)?;
        Tensor::new(r.shape.clone(), data).map_err(|e| Error::Manifest(e.to_string()))
    };
    let vector = |r: &BlobRef| -> Result<Vec<f32>> {
        if r.shape.len() != 1 {
            return Err(Error::Manifest(format!("expected a vector, got shape {:?}", r.shape)));
        }
        reader.f32s(r)
    };
    let weight = |r: &BlobRef, w: Option<Tensor<f32>>| -> Result<Tensor<f32>> {
        match w {
            Some(w) => Ok(w),
            None => tensor(r),
        }
    };
    Ok(match desc {
        LayerDescriptor::Conv2d {
            stride,
            padding,
            weight: w,
            bias,
        } => Layer::Conv2d(Conv2d {
            weight: weight(w, weight_override)?,
            bias: vector(bias)?,
            stride: *stride,
            padding: *padding,
        }),
        LayerDescriptor::BatchNorm2d {
            eps,
            gamma,
            beta,
            running_mean,
            running_std,
        } => Layer::BatchNorm2d(BatchNorm2d {
            gamma: vector(gamma)?,
            beta: vector(beta)?,
            running_mean: vector(running_mean)?,
            running_std: vector(running_std)?,
            eps: *eps,
        }),
        LayerDescriptor::Relu => Layer::Relu,
        LayerDescriptor::MaxPool2d { kernel, stride } => Layer::MaxPool2d(Pool {
            kernel: *kernel,
            stride: *stride,
        }),
        LayerDescriptor::AvgPool2d { kernel, stride } => Layer::AvgPool2d(Pool {
            kernel: *kernel,
            stride: *stride,
        }),
        LayerDescriptor::Flatten => Layer::Flatten,
        LayerDescriptor::Linear { weight: w, bias } => Layer::Linear(Linear {
            weight: weight(w, weight_override)?,
            bias: vector(bias)?,
        }),
    })
}

/// Serializes a model to the `.zsq` byte layout (parameters narrowed to `f32`).
pub fn encode_model<T: Real>(model: &ModelGraph<T>) -> Result<Vec<u8>> {
    let mut blob = BlobWriter::default();
    let layers = model
        .layers()
        .iter()
        .map(|l| describe_layer(l, &mut blob))
        .collect();
    let blob = blob.finish();
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        layers,
        blob_len: blob.len(),
        crc32: container::crc32(&blob),
    };
    container::encode(MODEL_MAGIC, MODEL_FORMAT_VERSION, &manifest, &blob)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    let (manifest, blob): (ModelManifest, _) =
        container::decode(bytes, MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let reader = BlobReader::new(blob);
    reader.check_layout(manifest.layers.iter().flat_map(|l| l.blob_refs()))?;
    if blob.len() < manifest.blob_len {
        return Err(Error::OutOfBounds(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    if blob.len() > manifest.blob_len {
        return Err(Error::Manifest("trailing bytes after blob".into()));
    }
    let actual = container::crc32(blob);
    if actual != manifest.crc32 {
        return Err(Error::Checksum {
            expected: manifest.crc32,
            actual,
        });
    }
    let layers = manifest
        .layers
        .iter()
        .map(|d| rebuild_layer(d, &reader, None))
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(manifest.input_shape, layers)
}

pub fn save_model<T: Real>(model: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    container::write_atomic(path.as_ref(), &encode_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph<f32>> {
    decode_model(&container::read(path.as_ref())?)
}
