//! `.q.zsq` quantized model files.
//!
//! Same container as `.zsq` (header `ZSQQ 1 <len>`, JSON manifest, blob).
//! Conv/linear weights are stored as `int8` codes; their blob references
//! therefore have `length == element count`. Every other parameter stays
//! `f32`. The manifest carries the `(s, z, k)` records for each weight tensor
//! (per tensor or per output channel) and for each activation site.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::model_io::format::{describe_layer, rebuild_layer, LayerDescriptor};
use crate::quant::affine::{Granularity, QuantParams, QuantizedTensor};
use crate::quant::model::{QuantizedModel, SiteId};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const QMODEL_MAGIC: &str = "ZSQQ";
pub const QMODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub site: SiteId,
    #[serde(flatten)]
    pub params: QuantParams<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub format_version: u32,
    pub bits: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDescriptor>,
    /// Keyed by layer index.
    pub weight_params: BTreeMap<usize, Granularity<f32>>,
    pub activations: Vec<ActivationRecord>,
    pub blob_len: usize,
    pub crc32: u32,
}

fn narrow<T: Real>(p: &QuantParams<T>) -> QuantParams<f32> {
    QuantParams {
        scale: p.scale.as_f32(),
        zero_point: p.zero_point,
        bits: p.bits,
    }
}

pub fn encode_quantized<T: Real>(qm: &QuantizedModel<T>) -> Result<Vec<u8>> {
    if !qm.is_simulated() {
        return Err(Error::InvalidConfig(
            "pass-through models have no quantized representation".into(),
        ));
    }
    let mut blob = BlobWriter::default();
    let mut layers = Vec::new();
    let mut weight_params = BTreeMap::new();
    for (i, layer) in qm.graph().layers().iter().enumerate() {
        let desc = match (layer, qm.weights().get(&i)) {
            (Layer::Conv2d(c), Some(q)) => LayerDescriptor::Conv2d {
                stride: c.stride,
                padding: c.padding,
                weight: blob.push_i8(&q.shape, &q.payload),
                bias: blob.push_f32(&[c.bias.len()], c.bias.iter().map(|v| v.as_f32())),
            },
            (Layer::Linear(l), Some(q)) => LayerDescriptor::Linear {
                weight: blob.push_i8(&q.shape, &q.payload),
                bias: blob.push_f32(&[l.bias.len()], l.bias.iter().map(|v| v.as_f32())),
            },
            (other, _) => describe_layer(other, &mut blob),
        };
        if let Some(q) = qm.weights().get(&i) {
            let g = match &q.params {
                Granularity::PerTensor(p) => Granularity::PerTensor(narrow(p)),
                Granularity::PerChannel(ps) => Granularity::PerChannel(ps.iter().map(narrow).collect()),
            };
            weight_params.insert(i, g);
        }
        layers.push(desc);
    }
    let activations = SiteId::all(qm.graph())
        .into_iter()
        .zip(qm.activations())
        .map(|(site, p)| ActivationRecord {
            site,
            params: narrow(p),
        })
        .collect();
    let blob = blob.finish();
    let manifest = QuantizedManifest {
        format_version: QMODEL_FORMAT_VERSION,
        bits: qm.bits(),
        input_shape: qm.graph().input_shape().to_vec(),
        layers,
        weight_params,
        activations,
        blob_len: blob.len(),
        crc32: container::crc32(&blob),
    };
    container::encode(QMODEL_MAGIC, QMODEL_FORMAT_VERSION, &manifest, &blob)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel<f32>> {
    let (m, blob): (QuantizedManifest, _) =
        container::decode(bytes, QMODEL_MAGIC, QMODEL_FORMAT_VERSION)?;
    if m.format_version != QMODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: QMODEL_FORMAT_VERSION,
        });
    }
    let reader = BlobReader::new(blob);
    reader.check_layout(m.layers.iter().flat_map(|l| l.blob_refs()))?;
    if blob.len() < m.blob_len {
        return Err(Error::OutOfBounds(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            m.blob_len
        )));
    }
    if blob.len() > m.blob_len {
        return Err(Error::Manifest("trailing bytes after blob".into()));
    }
    let actual = container::crc32(blob);
    if actual != m.crc32 {
        return Err(Error::Checksum {
            expected: m.crc32,
            actual,
        });
    }

    let mut weights = BTreeMap::new();
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, desc) in m.layers.iter().enumerate() {
        let wref = match desc {
            LayerDescriptor::Conv2d { weight, .. } | LayerDescriptor::Linear { weight, .. } => Some(weight),
            _ => None,
        };
        let deq = match wref {
            Some(r) => {
                let params = m
                    .weight_params
                    .get(&i)
                    .cloned()
                    .ok_or_else(|| Error::MissingRanges(vec![crate::quant::model::weight_id(i)]))?;
                match &params {
                    Granularity::PerTensor(p) => p.validate()?,
                    Granularity::PerChannel(ps) => {
                        if ps.len() != r.shape.first().copied().unwrap_or(0) {
                            return Err(Error::Manifest(format!("layer {i}: per-channel count mismatch")));
                        }
                        for p in ps {
                            p.validate()?;
                        }
                    }
                }
                let q = QuantizedTensor {
                    shape: r.shape.clone(),
                    payload: reader.i8s(r)?,
                    params,
                };
                let lo = crate::quant::affine::qmin(q.params.bits());
                let hi = crate::quant::affine::qmax(q.params.bits());
                if q.payload.iter().any(|&v| (v as i32) < lo || (v as i32) > hi) {
                    return Err(Error::Manifest(format!("layer {i}: code outside bit range")));
                }
                let t = crate::quant::affine::dequantize(&q);
                weights.insert(i, q);
                Some(t)
            }
            None => None,
        };
        layers.push(rebuild_layer(desc, &reader, deq)?);
    }
    let graph = ModelGraph::new(m.input_shape, layers)?;
    let sites = SiteId::all(&graph);
    if m.activations.len() != sites.len() || m.activations.iter().zip(&sites).any(|(r, s)| r.site != *s) {
        return Err(Error::Manifest(
            "activation records must list input and every layer output in order".into(),
        ));
    }
    let activations = m.activations.iter().map(|r| r.params).collect();
    QuantizedModel::from_parts(&graph, weights, activations, m.bits)
}

pub fn save_quantized<T: Real>(qm: &QuantizedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    container::write_atomic(path.as_ref(), &encode_quantized(qm)?)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel<f32>> {
    decode_quantized(&container::read(path.as_ref())?)
}

/// Dequantized weight of layer `i`, if quantized.
pub fn dequantized_weight<T: Real>(qm: &QuantizedModel<T>, i: usize) -> Option<Tensor<T>> {
    qm.weights().get(&i).map(crate::quant::affine::dequantize)
}
