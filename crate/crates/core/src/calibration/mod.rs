//! Activation statistics collection and clipping-range selection.

pub mod histogram;
pub mod select;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use histogram::{HistogramCollector, DEFAULT_BINS};
pub use select::{select_range, RangeMethod, RangeSelector};

use crate::container;
use crate::error::{Error, Result};
use crate::forward::apply_layer;
use crate::graph::ModelGraph;
use crate::quant::{weight_id, CalibRange, SiteId, WeightRange};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGranularity {
    #[default]
    PerTensor,
    PerChannel,
}

/// Range maps consumed by [`crate::quant::quantize_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration<T> {
    pub activations: BTreeMap<SiteId, CalibRange<T>>,
    pub weights: BTreeMap<usize, WeightRange<T>>,
    pub selector: RangeSelector,
}

/// Exact min/max ranges of every conv/linear weight tensor.
pub fn weight_ranges<T: Real>(
    model: &ModelGraph<T>,
    granularity: WeightGranularity,
) -> Result<BTreeMap<usize, WeightRange<T>>> {
    let mut out = BTreeMap::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let Some(w) = layer.weight() else { continue };
        let range = match granularity {
            WeightGranularity::PerTensor => {
                let (lo, hi) = w.min_max();
                WeightRange::PerTensor(CalibRange::widened(lo, hi)?)
            }
            WeightGranularity::PerChannel => {
                let stride = w.len() / w.shape()[0];
                let ranges = w
                    .data()
                    .chunks(stride)
                    .map(|ch| {
                        let (lo, hi) = ch
                            .iter()
                            .fold((T::infinity(), T::neg_infinity()), |(l, h), &v| (l.min(v), h.max(v)));
                        CalibRange::widened(lo, hi)
                    })
                    .collect::<Result<Vec<_>>>()?;
                WeightRange::PerChannel(ranges)
            }
        };
        out.insert(i, range);
    }
    Ok(out)
}

/// Fills one collector per activation site from the given batches.
pub fn collect_activations<T: Real>(
    model: &ModelGraph<T>,
    batches: &[Tensor<T>],
    bins: usize,
) -> Result<BTreeMap<SiteId, HistogramCollector>> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration needs at least one batch".into()));
    }
    let mut collectors: BTreeMap<SiteId, HistogramCollector> = SiteId::all(model)
        .into_iter()
        .map(|s| (s, HistogramCollector::new(s.to_string(), bins)))
        .collect();
    for batch in batches {
        if batch.rank() != model.input_shape().len() + 1 || &batch.shape()[1..] != model.input_shape() {
            return Err(Error::shape(
                None,
                format!(
                    "calibration batch {:?} does not match (N,) + {:?}",
                    batch.shape(),
                    model.input_shape()
                ),
            ));
        }
        collectors
            .get_mut(&SiteId::Input)
            .expect("input site")
            .observe(batch)?;
        let mut x = batch.clone();
        for i in 0..model.layers().len() {
            x = apply_layer(model, i, &x)?;
            collectors
                .get_mut(&SiteId::Layer(i))
                .expect("layer site")
                .observe(&x)?;
        }
    }
    Ok(collectors)
}

/// Forwards every batch, selects an activation range per site and computes
/// weight ranges directly from the weights (always exact min/max).
pub fn calibrate_model<T: Real>(
    model: &ModelGraph<T>,
    batches: &[Tensor<T>],
    sel: &RangeSelector,
    granularity: WeightGranularity,
) -> Result<Calibration<T>> {
    let collectors = collect_activations(model, batches, DEFAULT_BINS)?;
    let activations = collectors
        .iter()
        .map(|(&site, col)| Ok((site, select_range(col, sel)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Calibration {
        activations,
        weights: weight_ranges(model, granularity)?,
        selector: *sel,
    })
}

/// One entry of the calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f32>,
    /// Per-output-channel `[a, c]` pairs for per-channel weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<[f32; 2]>>,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

/// Calibration result file: identifiers → `{a, c, method, p}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    /// Where the calibration batches came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub bits: u32,
    pub method: RangeMethod,
    pub activations: BTreeMap<String, RangeRecord>,
    pub weights: BTreeMap<String, RangeRecord>,
}

impl<T: Real> Calibration<T> {
    pub fn to_file(&self) -> CalibrationFile {
        let method = self.selector.method;
        let rec = |r: &CalibRange<T>, m: &str, p: Option<f64>| RangeRecord {
            a: Some(r.a.as_f32()),
            c: Some(r.c.as_f32()),
            channels: None,
            method: m.to_string(),
            p,
        };
        let activations = self
            .activations
            .iter()
            .map(|(s, r)| (s.to_string(), rec(r, method.name(), method.percentile())))
            .collect();
        let weights = self
            .weights
            .iter()
            .map(|(&i, w)| {
                let r = match w {
                    WeightRange::PerTensor(r) => rec(r, "minmax", None),
                    WeightRange::PerChannel(rs) => RangeRecord {
                        a: None,
                        c: None,
                        channels: Some(rs.iter().map(|r| [r.a.as_f32(), r.c.as_f32()]).collect()),
                        method: "minmax".into(),
                        p: None,
                    },
                };
                (weight_id(i), r)
            })
            .collect();
        CalibrationFile {
            source: None,
            bits: self.selector.bits,
            method,
            activations,
            weights,
        }
    }
}

impl CalibrationFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("cannot serialize calibration: {e}")))?;
        text.push('\n');
        container::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = container::read(path.as_ref())?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(format!("calibration file: {e}")))
    }

    /// Range maps for `model`; every missing identifier is reported.
    pub fn to_calibration<T: Real>(&self, model: &ModelGraph<T>) -> Result<Calibration<T>> {
        let range = |r: &RangeRecord, id: &str| -> Result<CalibRange<T>> {
            match (r.a, r.c) {
                (Some(a), Some(c)) => CalibRange::widened(T::of(a as f64), T::of(c as f64)),
                _ => Err(Error::Manifest(format!("`{id}` lacks a/c"))),
            }
        };
        let mut missing = Vec::new();
        let mut activations = BTreeMap::new();
        for site in SiteId::all(model) {
            let id = site.to_string();
            match self.activations.get(&id) {
                Some(r) => {
                    activations.insert(site, range(r, &id)?);
                }
                None => missing.push(id),
            }
        }
        let mut weights = BTreeMap::new();
        for (i, layer) in model.layers().iter().enumerate() {
            let Some(w) = layer.weight() else { continue };
            let id = weight_id(i);
            match self.weights.get(&id) {
                Some(RangeRecord {
                    channels: Some(ch), ..
                }) => {
                    if ch.len() != w.shape()[0] {
                        return Err(Error::Manifest(format!("`{id}` has {} channel ranges", ch.len())));
                    }
                    let rs = ch
                        .iter()
                        .map(|[a, c]| CalibRange::widened(T::of(*a as f64), T::of(*c as f64)))
                        .collect::<Result<Vec<_>>>()?;
                    weights.insert(i, WeightRange::PerChannel(rs));
                }
                Some(r) => {
                    weights.insert(i, WeightRange::PerTensor(range(r, &id)?));
                }
                None => missing.push(id),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingRanges(missing));
        }
        Ok(Calibration {
            activations,
            weights,
            selector: RangeSelector::new(self.method, self.bits)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{build_toy_model, ToyArchitecture};

    fn small_model() -> ModelGraph<f32> {
        let mut arch = ToyArchitecture::reference();
        arch.input_shape = vec![3, 8, 8];
        arch.head = None;
        build_toy_model(&arch, 1).unwrap()
    }

    fn batch(seed: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![2, 3, 8, 8], |i| (((i + seed * 131) * 2654435761) % 1000) as f32 / 250.0 - 2.0)
    }

    #[test]
    fn constant_batch_still_calibrates() {
        let m = small_model();
        let b = Tensor::filled(vec![1, 3, 8, 8], 0.5f32);
        let sel = RangeSelector::new(RangeMethod::Percentile { p: 99.99 }, 8).unwrap();
        let cal = calibrate_model(&m, &[b], &sel, WeightGranularity::PerTensor).unwrap();
        assert_eq!(cal.activations.len(), m.layers().len() + 1);
        let r = cal.activations[&SiteId::Input];
        assert!(r.a < 0.5 && r.c > 0.5);
        assert!(crate::quant::quantize_model(&m, &cal.weights, &cal.activations, 8).is_ok());
    }

    #[test]
    fn minmax_is_order_independent() {
        let m = small_model();
        let bs: Vec<_> = (0..3).map(batch).collect();
        let sel = RangeSelector::new(RangeMethod::MinMax, 8).unwrap();
        let a = calibrate_model(&m, &bs, &sel, WeightGranularity::PerTensor).unwrap();
        let rev: Vec<_> = bs.iter().rev().cloned().collect();
        let b = calibrate_model(&m, &rev, &sel, WeightGranularity::PerTensor).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip_and_missing_sites() {
        let m = small_model();
        let sel = RangeSelector::new(RangeMethod::Entropy, 8).unwrap();
        let cal = calibrate_model(&m, &[batch(1)], &sel, WeightGranularity::PerChannel).unwrap();
        let file = cal.to_file();
        let text = serde_json::to_string(&file).unwrap();
        let back: CalibrationFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_calibration(&m).unwrap(), cal);
        let mut partial = back.clone();
        partial.activations.remove("layer2");
        partial.weights.remove("layer0.weight");
        match partial.to_calibration(&m) {
            Err(Error::MissingRanges(k)) => assert_eq!(k, vec!["layer2", "layer0.weight"]),
            other => panic!("{other:?}"),
        }
    }
}
