//! Clipping-range selection from a collected histogram.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::histogram::HistogramCollector;
use crate::error::{Error, Result};
use crate::quant::CalibRange;
use crate::scalar::Real;

/// Smoothing added to empty bins of the candidate distribution.
const KL_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum RangeMethod {
    MinMax,
    /// Two-sided: clip at the `(100 - p)`-th and `p`-th percentiles.
    Percentile { p: f64 },
    /// KL-divergence search over upper-tail truncations.
    Entropy,
}

impl RangeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            RangeMethod::MinMax => "minmax",
            RangeMethod::Percentile { .. } => "percentile",
            RangeMethod::Entropy => "entropy",
        }
    }

    pub fn percentile(&self) -> Option<f64> {
        match self {
            RangeMethod::Percentile { p } => Some(*p),
            _ => None,
        }
    }

    /// Builds a method from its name and optional percentile.
    pub fn parse(name: &str, p: Option<f64>) -> Result<Self> {
        let m = match name {
            "minmax" | "min-max" => RangeMethod::MinMax,
            "percentile" => RangeMethod::Percentile { p: p.unwrap_or(99.99) },
            "entropy" => RangeMethod::Entropy,
            other => return Err(Error::InvalidConfig(format!("unknown calibration method `{other}`"))),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let RangeMethod::Percentile { p } = self {
            if !(*p > 50.0 && *p <= 100.0) {
                return Err(Error::InvalidConfig(format!("percentile {p} outside (50, 100]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RangeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeMethod::Percentile { p } => write!(f, "percentile({p})"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for RangeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RangeMethod::parse(s, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSelector {
    pub method: RangeMethod,
    /// Target bit-width; drives the entropy search.
    pub bits: u32,
}

impl RangeSelector {
    pub fn new(method: RangeMethod, bits: u32) -> Result<Self> {
        method.validate()?;
        Ok(RangeSelector { method, bits })
    }
}

/// Selects `[a, c]` for a collector. Zero-width results are widened.
pub fn select_range<T: Real>(col: &HistogramCollector, sel: &RangeSelector) -> Result<CalibRange<T>> {
    sel.method.validate()?;
    if col.is_empty() {
        return Err(Error::Empty(format!("histogram `{}` has no samples", col.site)));
    }
    let (lo, hi) = col.observed();
    let (a, c) = match sel.method {
        RangeMethod::MinMax => (lo, hi),
        RangeMethod::Percentile { p } => {
            let a = col.quantile((100.0 - p) / 100.0)?;
            let c = col.quantile(p / 100.0)?;
            (a.max(lo), c.min(hi))
        }
        RangeMethod::Entropy => (lo, entropy_upper(col, sel.bits)),
    };
    CalibRange::widened(T::of(a), T::of(c))
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    if ps <= 0.0 || qs <= 0.0 {
        return f64::INFINITY;
    }
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pn = pi / ps;
            let qn = (qi / qs).max(KL_SMOOTHING);
            pn * (pn / qn).ln()
        })
        .sum()
}

/// Upper clip minimizing `KL(P || Q)`, where `P` is the histogram truncated
/// at bin `i` with the tail mass folded into bin `i - 1`, and `Q` is the
/// truncated histogram requantized onto `2^bits` levels (each level's mass
/// spread evenly over its non-empty bins). Candidates are bin boundaries at
/// least `2^bits` bins from the start.
fn entropy_upper(col: &HistogramCollector, bits: u32) -> f64 {
    let counts: Vec<f64> = col.counts().iter().map(|&c| c as f64).collect();
    let nb = counts.len();
    let levels = 1usize << bits.min(16);
    let (lo, hi) = col.observed();
    if nb < levels || hi <= lo {
        return hi;
    }
    let width = col.bin_width();
    let mut suffix = vec![0.0; nb + 1];
    for j in (0..nb).rev() {
        suffix[j] = suffix[j + 1] + counts[j];
    }
    let mut best = (f64::INFINITY, nb);
    let mut p = vec![0.0; nb];
    let mut q = vec![0.0; nb];
    for i in levels..=nb {
        p[..i].copy_from_slice(&counts[..i]);
        p[i - 1] += suffix[i];
        for g in 0..levels {
            let (s, e) = (g * i / levels, (g + 1) * i / levels);
            let group = &counts[s..e];
            let total: f64 = group.iter().sum();
            let nonzero = group.iter().filter(|&&v| v > 0.0).count();
            for (j, &v) in group.iter().enumerate() {
                q[s + j] = if v > 0.0 { total / nonzero as f64 } else { 0.0 };
            }
        }
        let kl = kl_divergence(&p[..i], &q[..i]);
        if kl < best.0 {
            best = (kl, i);
        }
    }
    if best.1 == nb {
        hi
    } else {
        lo + best.1 as f64 * width
    }
}
