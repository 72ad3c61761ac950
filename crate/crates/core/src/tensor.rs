//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Stabilizer added to the biased variance before taking the square root in
/// [`batch_stats`].
pub const STD_EPS: f64 = 1e-8;

/// Dense tensor, row-major, outermost dimension first. Activations are
/// `(N, C, H, W)` or `(N, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches, zero-sized dimensions and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(None, format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                None,
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: None });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for data already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![T::zero(); n])
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` for rank-4 tensors.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                None,
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                None,
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::from_parts(shape, self.data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous slice of batch element `i` (first dimension).
    pub fn item(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Concatenates tensors along the first dimension.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no tensors to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(
                    None,
                    format!("cannot concatenate {:?} with {:?}", first.shape, p.shape),
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Rows `[start, start + count)` along the first dimension.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape[0] {
            return Err(Error::shape(
                None,
                format!(
                    "batch slice {start}..{} out of range for {:?}",
                    start + count,
                    self.shape
                ),
            ));
        }
        let stride = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..(start + count) * stride].to_vec(),
        ))
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Per-channel batch mean and standard deviation of an `(N, C, H, W)` tensor.
///
/// The variance is biased (divides by `N·H·W`) and `std = sqrt(var + 1e-8)`.
/// Accumulation runs over channel `c` in `n, h, w` order so results are
/// reproducible bit for bit.
pub fn batch_stats<T: Real>(t: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let eps = T::of(STD_EPS);
    let data = t.data();
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for &v in &data[off..off + plane] {
                sum = sum + v;
            }
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for &v in &data[off..off + plane] {
                let d = v - mean;
                sq = sq + d * d;
            }
        }
        means.push(mean);
        stds.push((sq / count + eps).sqrt());
    }
    Ok((means, stds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn stats_of_constant() {
        let t = Tensor::filled(vec![2, 3, 2, 2], 5.0f64);
        let (m, s) = batch_stats(&t).unwrap();
        for c in 0..3 {
            assert_eq!(m[c], 5.0);
            assert!((s[c] - STD_EPS.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_of_pair() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0f64, 2.0]).unwrap();
        let (m, s) = batch_stats(&t).unwrap();
        assert_eq!(m[0], 1.0);
        assert!((s[0] - (1.0 + STD_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_symmetric_mean() {
        let t = Tensor::new(vec![2, 1, 1, 1], vec![-3.0f32, 3.0]).unwrap();
        let (m, _) = batch_stats(&t).unwrap();
        assert_eq!(m[0], 0.0);
    }

    #[test]
    fn stats_rejects_rank2() {
        let t = Tensor::filled(vec![2, 3], 1.0f32);
        assert!(batch_stats(&t).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::from_fn(vec![2, 3], |i| i as f32);
        let b = Tensor::from_fn(vec![1, 3], |i| 10.0 + i as f32);
        let c = Tensor::concat(&[a.clone(), b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.slice_batch(0, 2).unwrap(), a);
        assert!(c.slice_batch(2, 2).is_err());
    }
}
