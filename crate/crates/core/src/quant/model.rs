//! Simulated W/A quantization of a whole model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::forward::{apply_layer, forward};
use crate::graph::{Layer, ModelGraph};
use crate::quant::affine::{
    compute_params, dequantize, fake_quantize, quantize, quantize_per_channel, CalibRange,
    QuantParams, QuantizedTensor,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Activation site: the model input or the output of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteId {
    Input,
    Layer(usize),
}

impl SiteId {
    /// Every activation site of `model`, input first.
    pub fn all<T: Real>(model: &ModelGraph<T>) -> Vec<SiteId> {
        std::iter::once(SiteId::Input)
            .chain((0..model.layers().len()).map(SiteId::Layer))
            .collect()
    }

    fn position(self) -> usize {
        match self {
            SiteId::Input => 0,
            SiteId::Layer(i) => i + 1,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::Input => write!(f, "input"),
            SiteId::Layer(i) => write!(f, "layer{i}"),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "input" {
            return Ok(SiteId::Input);
        }
        s.strip_prefix("layer")
            .and_then(|n| n.parse().ok())
            .map(SiteId::Layer)
            .ok_or_else(|| Error::Manifest(format!("unknown activation site `{s}`")))
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifier of the weight tensor of layer `i` in range maps and reports.
pub fn weight_id(layer: usize) -> String {
    format!("layer{layer}.weight")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRange<T> {
    PerTensor(CalibRange<T>),
    /// Ranges per output channel (first weight dimension).
    PerChannel(Vec<CalibRange<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel<T> {
    /// Source structure with conv/linear weights replaced by their
    /// dequantized values; BN and biases stay full precision.
    graph: ModelGraph<T>,
    weights: BTreeMap<usize, QuantizedTensor<T>>,
    /// Indexed by site position: 0 = input, `i + 1` = output of layer `i`.
    activations: Vec<QuantParams<T>>,
    bits: u32,
    simulate: bool,
}

impl<T: Real> QuantizedModel<T> {
    /// Reassembles a model from stored parts (used by the file loader).
    pub(crate) fn from_parts(
        source: &ModelGraph<T>,
        weights: BTreeMap<usize, QuantizedTensor<T>>,
        activations: Vec<QuantParams<T>>,
        bits: u32,
    ) -> Result<Self> {
        if activations.len() != source.layers().len() + 1 {
            return Err(Error::Manifest(format!(
                "{} activation sites for {} layers",
                activations.len(),
                source.layers().len()
            )));
        }
        for p in &activations {
            p.validate()?;
        }
        let mut layers = source.layers().to_vec();
        for (i, layer) in layers.iter_mut().enumerate() {
            let has_weight = layer.weight().is_some();
            match (has_weight, weights.get(&i)) {
                (true, Some(q)) => {
                    let deq = dequantize(q);
                    if deq.shape() != layer.weight().expect("weight").shape() {
                        return Err(Error::shape(Some(i), "quantized weight shape mismatch"));
                    }
                    match layer {
                        Layer::Conv2d(c) => c.weight = deq,
                        Layer::Linear(l) => l.weight = deq,
                        _ => unreachable!(),
                    }
                }
                (true, None) => return Err(Error::MissingRanges(vec![weight_id(i)])),
                (false, Some(_)) => {
                    return Err(Error::Manifest(format!("layer {i} has no weight to quantize")))
                }
                (false, None) => {}
            }
        }
        Ok(QuantizedModel {
            graph: source.with_layers(layers)?,
            weights,
            activations,
            bits,
            simulate: true,
        })
    }

    /// Wraps a full-precision model with fake quantization disabled; its
    /// forward pass is bit-identical to [`forward`].
    pub fn passthrough(model: &ModelGraph<T>) -> Self {
        QuantizedModel {
            graph: model.clone(),
            weights: BTreeMap::new(),
            activations: Vec::new(),
            bits: 32,
            simulate: false,
        }
    }

    pub fn graph(&self) -> &ModelGraph<T> {
        &self.graph
    }

    pub fn weights(&self) -> &BTreeMap<usize, QuantizedTensor<T>> {
        &self.weights
    }

    pub fn activation_params(&self, site: SiteId) -> Option<&QuantParams<T>> {
        self.activations.get(site.position())
    }

    pub fn activations(&self) -> &[QuantParams<T>] {
        &self.activations
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_simulated(&self) -> bool {
        self.simulate
    }
}

/// Quantizes every conv/linear weight and attaches activation parameters to
/// every site. Missing entries are reported together.
pub fn quantize_model<T: Real>(
    model: &ModelGraph<T>,
    weight_ranges: &BTreeMap<usize, WeightRange<T>>,
    activation_ranges: &BTreeMap<SiteId, CalibRange<T>>,
    bits: u32,
) -> Result<QuantizedModel<T>> {
    let mut missing = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if layer.weight().is_some() && !weight_ranges.contains_key(&i) {
            missing.push(weight_id(i));
        }
    }
    for site in SiteId::all(model) {
        if !activation_ranges.contains_key(&site) {
            missing.push(site.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingRanges(missing));
    }

    let mut weights = BTreeMap::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let Some(w) = layer.weight() else { continue };
        let q = match &weight_ranges[&i] {
            WeightRange::PerTensor(r) => quantize(w, &compute_params(r, bits)?),
            WeightRange::PerChannel(rs) => {
                let ps = rs
                    .iter()
                    .map(|r| compute_params(r, bits))
                    .collect::<Result<Vec<_>>>()?;
                quantize_per_channel(w, &ps)?
            }
        };
        weights.insert(i, q);
    }
    let activations = SiteId::all(model)
        .into_iter()
        .map(|s| compute_params(&activation_ranges[&s], bits))
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::from_parts(model, weights, activations, bits)
}

/// Simulated integer inference: fake quantization on the input and after
/// every layer, with dequantized weights.
pub fn forward_quantized<T: Real>(qm: &QuantizedModel<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if !qm.simulate {
        return forward(&qm.graph, input, false).map(|(y, _)| y);
    }
    // Shape and finiteness checks.
    if input.rank() != qm.graph.input_shape().len() + 1 || &input.shape()[1..] != qm.graph.input_shape() {
        return Err(Error::shape(
            None,
            format!(
                "input shape {:?} does not match (N,) + {:?}",
                input.shape(),
                qm.graph.input_shape()
            ),
        ));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }
    let mut x = fake_quantize(input, &qm.activations[0]);
    for i in 0..qm.graph.layers().len() {
        x = apply_layer(&qm.graph, i, &x)?;
        x = fake_quantize(&x, &qm.activations[i + 1]);
    }
    Ok(x)
}
