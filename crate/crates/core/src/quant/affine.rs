//! Uniform asymmetric (affine) quantization.
//!
//! `Q(x) = clamp(round(x / s) + z)` with `s = (c - a) / (2^k - 1)` and
//! `z = -round(a / s) - 2^(k-1)`; rounding is half-away-from-zero and codes
//! live in `[-2^(k-1), 2^(k-1) - 1]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Half-width used to widen a degenerate (zero-width) range.
pub const DEGENERATE_WIDEN: f64 = 1e-8;

pub fn qmin(bits: u32) -> i32 {
    -(1 << (bits - 1))
}

pub fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Clipping range `[a, c]` with `a < c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibRange<T> {
    pub a: T,
    pub c: T,
}

impl<T: Real> CalibRange<T> {
    pub fn new(a: T, c: T) -> Result<Self> {
        if !(a.is_finite() && c.is_finite()) || !(a < c) {
            return Err(Error::DegenerateRange {
                a: a.as_f64(),
                c: c.as_f64(),
            });
        }
        Ok(CalibRange { a, c })
    }

    /// Accepts `a <= c`; a zero-width range is widened to
    /// `[a - 1e-8, c + 1e-8]` (or by one ulp-scale step when `1e-8` is below
    /// the type's resolution at `a`) and a warning is logged.
    pub fn widened(a: T, c: T) -> Result<Self> {
        if a < c {
            return CalibRange::new(a, c);
        }
        if !(a.is_finite() && c.is_finite()) || a > c {
            return Err(Error::DegenerateRange {
                a: a.as_f64(),
                c: c.as_f64(),
            });
        }
        let step = T::of(DEGENERATE_WIDEN).max(a.abs() * T::epsilon() * T::of(2.0));
        log::warn!("degenerate range [{a}, {c}] widened by {step}");
        CalibRange::new(a - step, c + step)
    }

    pub fn width(&self) -> T {
        self.c - self.a
    }

    pub fn contains(&self, other: &CalibRange<T>) -> bool {
        self.a <= other.a && other.c <= self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams<T> {
    pub scale: T,
    pub zero_point: i32,
    pub bits: u32,
}

impl<T: Real> fmt::Display for QuantParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s={} z={} k={}", self.scale, self.zero_point, self.bits)
    }
}

impl<T: Real> QuantParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bit-width {} outside {MIN_BITS}..={MAX_BITS}",
                self.bits
            )));
        }
        if !(self.scale > T::zero() && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale {} must be positive", self.scale)));
        }
        if self.zero_point < qmin(self.bits) || self.zero_point > qmax(self.bits) {
            return Err(Error::InvalidConfig(format!(
                "zero-point {} outside the {}-bit range",
                self.zero_point, self.bits
            )));
        }
        Ok(())
    }

    /// Real interval covered by the integer grid.
    pub fn representable(&self) -> (T, T) {
        (
            self.dequantize_code(qmin(self.bits) as i8),
            self.dequantize_code(qmax(self.bits) as i8),
        )
    }

    #[inline]
    pub fn quantize_value(&self, x: T) -> i8 {
        let lo = T::of(qmin(self.bits) as f64);
        let hi = T::of(qmax(self.bits) as f64);
        let v = (x / self.scale).round() + T::of(self.zero_point as f64);
        // Clamping in the real domain keeps infinities and huge ratios total.
        v.max(lo).min(hi).to_i8().expect("clamped code fits i8")
    }

    #[inline]
    pub fn dequantize_code(&self, q: i8) -> T {
        T::of((q as i32 - self.zero_point) as f64) * self.scale
    }
}

/// Scale and zero-point for a clipping range.
///
/// The range is first extended to contain zero (`[min(a,0), max(c,0)]`) so
/// that real zero is exactly representable and the zero-point always lands
/// inside the integer range; for ranges that already contain zero this is the
/// identity. `a / s` is evaluated as `a·(2^k-1)/(c-a)`, which is exact for
/// symmetric ranges.
pub fn compute_params<T: Real>(range: &CalibRange<T>, bits: u32) -> Result<QuantParams<T>> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    if !(range.a < range.c) {
        return Err(Error::DegenerateRange {
            a: range.a.as_f64(),
            c: range.c.as_f64(),
        });
    }
    let a = range.a.min(T::zero());
    let c = range.c.max(T::zero());
    let levels = T::of(((1u32 << bits) - 1) as f64);
    let width = c - a;
    let scale = width / levels;
    if !(scale > T::zero() && scale.is_finite()) {
        return Err(Error::DegenerateRange {
            a: range.a.as_f64(),
            c: range.c.as_f64(),
        });
    }
    let a_over_s = (a * levels / width).round();
    let z = -a_over_s.as_f64() as i64 - (1i64 << (bits - 1));
    let z = z.clamp(qmin(bits) as i64, qmax(bits) as i64) as i32;
    Ok(QuantParams {
        scale,
        zero_point: z,
        bits,
    })
}

/// Quantization parameters of a [`QuantizedTensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "granularity", content = "params", rename_all = "snake_case")]
pub enum Granularity<T> {
    PerTensor(QuantParams<T>),
    /// One parameter set per slice along the first dimension.
    PerChannel(Vec<QuantParams<T>>),
}

impl<T: Real> Granularity<T> {
    pub fn bits(&self) -> u32 {
        match self {
            Granularity::PerTensor(p) => p.bits,
            Granularity::PerChannel(ps) => ps[0].bits,
        }
    }

    fn for_channel(&self, c: usize) -> &QuantParams<T> {
        match self {
            Granularity::PerTensor(p) => p,
            Granularity::PerChannel(ps) => &ps[c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    pub shape: Vec<usize>,
    /// Signed codes, one per element (every supported bit-width fits in `i8`).
    pub payload: Vec<i8>,
    pub params: Granularity<T>,
}

pub fn quantize<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> QuantizedTensor<T> {
    QuantizedTensor {
        shape: x.shape().to_vec(),
        payload: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
        params: Granularity::PerTensor(*p),
    }
}

/// Per-channel quantization along the first dimension.
pub fn quantize_per_channel<T: Real>(x: &Tensor<T>, params: &[QuantParams<T>]) -> Result<QuantizedTensor<T>> {
    let channels = x.shape()[0];
    if params.len() != channels {
        return Err(Error::shape(
            None,
            format!("{} channel parameter sets for {channels} channels", params.len()),
        ));
    }
    let stride = x.len() / channels;
    let payload = x
        .data()
        .chunks(stride)
        .zip(params)
        .flat_map(|(chunk, p)| chunk.iter().map(move |&v| p.quantize_value(v)))
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        payload,
        params: Granularity::PerChannel(params.to_vec()),
    })
}

pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let stride = q.payload.len() / q.shape[0];
    let data = q
        .payload
        .iter()
        .enumerate()
        .map(|(i, &code)| q.params.for_channel(i / stride).dequantize_code(code))
        .collect();
    Tensor::from_parts(q.shape.clone(), data)
}

/// `dequantize(quantize(x, p))`.
pub fn fake_quantize<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    x.map(|v| p.dequantize_code(p.quantize_value(v)))
}
