//! Streaming, mergeable activation histograms.
//!
//! Bins are linear over `[observed_min, observed_max]`. Every observed chunk
//! keeps its own exact histogram over its own range; the collector's counts
//! are the sum of those chunk histograms redistributed proportionally onto
//! the current binning (cumulative rounding keeps every count integral and
//! the total exact). Each chunk is redistributed straight from its exact
//! counts, so the result does not depend on the order in which chunks were
//! observed or merged.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 2048;

/// Exact histogram of one observed chunk over its own `[min, max]`.
#[derive(Debug, Clone, PartialEq)]
struct Chunk {
    min: f64,
    max: f64,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramCollector {
    pub site: String,
    min: f64,
    max: f64,
    counts: Vec<u64>,
    total: u64,
    chunks: Vec<Chunk>,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let width = hi - lo;
    if width <= 0.0 {
        return 0;
    }
    let b = ((v - lo) / width * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Adds `chunk` to `out`, a histogram over `[lo, hi] ⊇ [chunk.min, chunk.max]`.
fn redistribute(chunk: &Chunk, lo: f64, hi: f64, out: &mut [u64]) {
    let nb = out.len();
    if chunk.min == lo && chunk.max == hi {
        for (o, &n) in out.iter_mut().zip(&chunk.counts) {
            *o += n;
        }
        return;
    }
    if chunk.max <= chunk.min {
        // Every sample of the chunk sits at one point.
        out[bin_index(chunk.min, lo, hi, nb)] += chunk.counts.iter().sum::<u64>();
        return;
    }
    let new_w = (hi - lo) / nb as f64;
    let old_w = (chunk.max - chunk.min) / chunk.counts.len() as f64;
    for (j, &n) in chunk.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        // Chunk bin j covers [p0, p1) in output-bin units.
        let p0 = (chunk.min + j as f64 * old_w - lo) / new_w;
        let p1 = (chunk.min + (j + 1) as f64 * old_w - lo) / new_w;
        let span = p1 - p0;
        let first = (p0.floor().max(0.0) as usize).min(nb - 1);
        let last = ((p1.ceil() as usize).saturating_sub(1)).clamp(first, nb - 1);
        if first == last || span <= 0.0 {
            out[first] += n;
            continue;
        }
        let mut assigned = 0u64;
        for k in first..=last {
            let upto = if k == last {
                n
            } else {
                let covered = ((k + 1) as f64).min(p1) - p0;
                ((n as f64) * (covered / span)).round().min(n as f64) as u64
            };
            let upto = upto.max(assigned);
            out[k] += upto - assigned;
            assigned = upto;
        }
    }
}

impl HistogramCollector {
    pub fn new(site: impl Into<String>, bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        HistogramCollector {
            site: site.into(),
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            counts: vec![0; bins],
            total: 0,
            chunks: Vec::new(),
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// `(observed_min, observed_max)`; meaningful once non-empty.
    pub fn observed(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    /// Rebuilds the counts over the current range from every chunk.
    fn rebuild(&mut self) {
        let mut counts = vec![0; self.counts.len()];
        for c in &self.chunks {
            redistribute(c, self.min, self.max, &mut counts);
        }
        self.counts = counts;
    }

    fn push(&mut self, chunk: Chunk) {
        let n: u64 = chunk.counts.iter().sum();
        if chunk.min < self.min || chunk.max > self.max {
            self.min = self.min.min(chunk.min);
            self.max = self.max.max(chunk.max);
            self.chunks.push(chunk);
            self.rebuild();
        } else {
            redistribute(&chunk, self.min, self.max, &mut self.counts);
            self.chunks.push(chunk);
        }
        self.total += n;
    }

    /// Adds every element of `t` to the histogram.
    pub fn observe<T: Real>(&mut self, t: &Tensor<T>) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite { layer: None });
        }
        if t.is_empty() {
            return Ok(());
        }
        let (lo, hi) = t.min_max();
        let (lo, hi) = (lo.as_f64(), hi.as_f64());
        let bins = self.bins();
        let mut counts = vec![0u64; bins];
        for &v in t.data() {
            counts[bin_index(v.as_f64(), lo, hi, bins)] += 1;
        }
        self.push(Chunk { min: lo, max: hi, counts });
        debug_assert_eq!(self.counts.iter().sum::<u64>(), self.total);
        Ok(())
    }

    /// Combines two collectors over the union of their ranges.
    pub fn merge(&self, other: &HistogramCollector) -> Result<HistogramCollector> {
        if self.bins() != other.bins() {
            return Err(Error::InvalidConfig(format!(
                "cannot merge histograms with {} and {} bins",
                self.bins(),
                other.bins()
            )));
        }
        let mut out = self.clone();
        out.min = self.min.min(other.min);
        out.max = self.max.max(other.max);
        out.total += other.total;
        out.chunks.extend(other.chunks.iter().cloned());
        out.rebuild();
        Ok(out)
    }

    /// Value below which a fraction `q` of the observed mass lies, with
    /// linear interpolation inside the bin.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty(format!("histogram `{}` has no samples", self.site)));
        }
        let q = q.clamp(0.0, 1.0);
        let width = self.bin_width();
        let target = q * self.total as f64;
        let mut cum = 0.0;
        for (j, &n) in self.counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let next = cum + n as f64;
            if next >= target {
                let frac = ((target - cum) / n as f64).clamp(0.0, 1.0);
                let v = self.min + (j as f64 + frac) * width;
                return Ok(v.clamp(self.min, self.max));
            }
            cum = next;
        }
        Ok(self.max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn constant_observation() {
        let mut h = HistogramCollector::new("s", 16);
        h.observe(&Tensor::filled(vec![2, 5], 3.0f32)).unwrap();
        assert_eq!(h.observed(), (3.0, 3.0));
        assert_eq!(h.total_count(), 10);
        assert_eq!(h.counts()[0], 10);
    }

    #[test]
    fn running_extrema() {
        let mut h = HistogramCollector::new("s", 64);
        h.observe(&t((1..=10).map(f64::from).collect())).unwrap();
        h.observe(&t((11..=20).map(f64::from).collect())).unwrap();
        assert_eq!(h.observed(), (1.0, 20.0));
        assert_eq!(h.total_count(), 20);
    }

    #[test]
    fn growth_from_point_mass() {
        let mut h = HistogramCollector::new("s", 8);
        h.observe(&t(vec![2.0; 4])).unwrap();
        h.observe(&t(vec![0.0, 8.0])).unwrap();
        assert_eq!(h.total_count(), 6);
        assert_eq!(h.counts()[2], 4);
    }

    #[test]
    fn non_finite_rejected() {
        let mut h = HistogramCollector::new("s", 8);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        assert!(h.observe(&bad).is_err());
    }

    proptest! {
        #[test]
        fn counts_conserved(a in proptest::collection::vec(-100.0f64..100.0, 1..200),
                            b in proptest::collection::vec(-1000.0f64..1000.0, 1..200),
                            bins in 1usize..300) {
            let mut ha = HistogramCollector::new("a", bins);
            ha.observe(&t(a.clone())).unwrap();
            let mut hb = HistogramCollector::new("b", bins);
            hb.observe(&t(b.clone())).unwrap();
            let m = ha.merge(&hb).unwrap();
            prop_assert_eq!(m.total_count(), (a.len() + b.len()) as u64);
            prop_assert_eq!(m.counts().iter().sum::<u64>(), m.total_count());
            ha.observe(&t(b)).unwrap();
            prop_assert_eq!(ha.counts().iter().sum::<u64>(), ha.total_count());
            prop_assert_eq!(ha.observed(), m.observed());
        }
    }
}
