//! Per-layer forward and input-gradient kernels.
//!
//! Batch elements are processed independently (optionally in parallel); each
//! element's arithmetic runs in a fixed order so results are identical for
//! any thread count.

use rayon::prelude::*;

use crate::graph::{BatchNorm2d, Conv2d, Linear, Pool};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Output-column range `[lo, hi)` for which `o*stride + k - pad` lands in `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= size - 1
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one `(C, H, W)` image into a `(C·kH·kW, oH·oW)` column matrix.
fn im2col<T: Real>(conv: &Conv2d<T>, x: &[T], in_shape: (usize, usize, usize), out_hw: (usize, usize), col: &mut [T]) {
    let (cin, h, w) = in_shape;
    let (oh, ow) = out_hw;
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride, conv.padding);
    let plane = oh * ow;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, p);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, p);
                let row = &mut col[((ci * kh + ky) * kw + kx) * plane..][..plane];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = xc[iy * w + ox * s + kx - p];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back onto an image.
fn col2im<T: Real>(conv: &Conv2d<T>, col: &[T], in_shape: (usize, usize, usize), out_hw: (usize, usize), gx: &mut [T]) {
    let (cin, h, w) = in_shape;
    let (oh, ow) = out_hw;
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride, conv.padding);
    let plane = oh * ow;
    for ci in 0..cin {
        let gxc = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, p);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, p);
                let row = &col[((ci * kh + ky) * kw + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        let ix = iy * w + ox * s + kx - p;
                        gxc[ix] = gxc[ix] + src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(conv: &Conv2d<T>, x: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let (n, cin, h, w) = x.dims4().expect("validated rank");
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let (kh, kw) = conv.kernel();
    let k = cin * kh * kw;
    let plane = oh * ow;
    let wt = conv.weight.data();
    let in_sz = cin * h * w;
    let out_sz = cout * plane;
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.data().par_chunks(in_sz))
        .for_each_init(
            || vec![T::zero(); k * plane],
            |col, (y, xin)| {
                im2col(conv, xin, (cin, h, w), (oh, ow), col);
                for (co, yc) in y.chunks_mut(plane).enumerate() {
                    yc.fill(conv.bias[co]);
                }
                T::gemm(cout, k, plane, wt, false, col, T::one(), y);
            },
        );
    Tensor::from_parts(vec![n, cout, oh, ow], out)
}

pub(crate) fn conv2d_backward<T: Real>(conv: &Conv2d<T>, in_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, cout, oh, ow) = gy.dims4().expect("validated rank");
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (kh, kw) = conv.kernel();
    let k = cin * kh * kw;
    let plane = oh * ow;
    let wt = conv.weight.data();
    let in_sz = cin * h * w;
    let out_sz = cout * plane;
    let mut gx = vec![T::zero(); n * in_sz];
    gx.par_chunks_mut(in_sz)
        .zip(gy.data().par_chunks(out_sz))
        .for_each_init(
            || vec![T::zero(); k * plane],
            |col, (gxs, gys)| {
                // col = W^T · gy, with W stored (cout × k).
                T::gemm(k, cout, plane, wt, true, gys, T::zero(), col);
                col2im(conv, col, (cin, h, w), (oh, ow), gxs);
            },
        );
    Tensor::from_parts(vec![n, cin, h, w], gx)
}

pub(crate) fn batchnorm_forward<T: Real>(bn: &BatchNorm2d<T>, x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("validated rank");
    let affine = bn.affine();
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (scale, shift) = affine[i % c];
        for v in chunk {
            *v = scale * *v + shift;
        }
    }
    debug_assert_eq!(out.len(), n * c * plane);
    out
}

pub(crate) fn batchnorm_backward<T: Real>(bn: &BatchNorm2d<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = gy.dims4().expect("validated rank");
    let affine = bn.affine();
    let mut gx = gy.clone();
    for (i, chunk) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let scale = affine[i % c].0;
        for v in chunk {
            *v = *v * scale;
        }
    }
    gx
}

pub(crate) fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at zero is zero.
pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(gy.shape().to_vec(), data)
}

pub(crate) fn maxpool_forward<T: Real>(pool: &Pool, x: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("validated rank");
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        let v = xp[(oy * pool.stride + ky) * w + ox * pool.stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

/// Routes each output gradient to the first maximal element in scan order.
pub(crate) fn maxpool_backward<T: Real>(pool: &Pool, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("validated rank");
    let (_, _, oh, ow) = gy.dims4().expect("validated rank");
    let xd = x.data();
    let gd = gy.data();
    let mut gx = vec![T::zero(); xd.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        let idx = (oy * pool.stride + ky) * w + ox * pool.stride + kx;
                        if xd[base + idx] > best {
                            best = xd[base + idx];
                            arg = idx;
                        }
                    }
                }
                gx[base + arg] = gx[base + arg] + gd[(plane * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}

pub(crate) fn avgpool_forward<T: Real>(pool: &Pool, x: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("validated rank");
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let inv = T::of(1.0 / (pool.kernel * pool.kernel) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = T::zero();
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        sum = sum + xp[(oy * pool.stride + ky) * w + ox * pool.stride + kx];
                    }
                }
                out.push(sum * inv);
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

pub(crate) fn avgpool_backward<T: Real>(pool: &Pool, in_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = gy.dims4().expect("validated rank");
    let (h, w) = (in_shape[1], in_shape[2]);
    let inv = T::of(1.0 / (pool.kernel * pool.kernel) as f64);
    let gd = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        let idx = base + (oy * pool.stride + ky) * w + ox * pool.stride + kx;
                        gx[idx] = gx[idx] + g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], gx)
}

pub(crate) fn linear_forward<T: Real>(lin: &Linear<T>, x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let (fo, fi) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    let wd = lin.weight.data();
    let mut out = vec![T::zero(); n * fo];
    out.par_chunks_mut(fo)
        .zip(x.data().par_chunks(fi))
        .for_each(|(y, xv)| {
            for (o, yv) in y.iter_mut().enumerate() {
                let row = &wd[o * fi..(o + 1) * fi];
                let mut acc = T::zero();
                for (&a, &b) in row.iter().zip(xv) {
                    acc = acc + a * b;
                }
                *yv = acc + lin.bias[o];
            }
        });
    Tensor::from_parts(vec![n, fo], out)
}

pub(crate) fn linear_backward<T: Real>(lin: &Linear<T>, gy: &Tensor<T>) -> Tensor<T> {
    let n = gy.shape()[0];
    let (fo, fi) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    let wd = lin.weight.data();
    let mut gx = vec![T::zero(); n * fi];
    gx.par_chunks_mut(fi)
        .zip(gy.data().par_chunks(fo))
        .for_each(|(gxs, gys)| {
            for (o, &g) in gys.iter().enumerate() {
                let row = &wd[o * fi..(o + 1) * fi];
                for (x, &wv) in gxs.iter_mut().zip(row) {
                    *x = *x + g * wv;
                }
            }
        });
    Tensor::from_parts(vec![n, fi], gx)
}
