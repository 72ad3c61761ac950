//! Helpers shared by the integration test targets: a literal scalar
//! quantization oracle, random toy architectures and finite differences.
#![allow(dead_code)]

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zsq_core::model_io::{build_toy_model, BlockSpec, HeadSpec, PoolKind, PoolSpec, ToyArchitecture};
use zsq_core::{ModelGraph, Objective, Tensor};

/// Round half away from zero, written out by hand.
pub fn round_half_away<F: Float>(v: F) -> F {
    let t = v.trunc();
    let half = F::from(0.5).unwrap();
    if (v - t).abs() >= half {
        t + v.signum()
    } else {
        t
    }
}

/// Scale and zero-point for `[a, c]` at `k` bits, on the range widened to
/// contain zero.
pub fn oracle_params<F: Float>(a: F, c: F, k: u32) -> (F, i32) {
    let a = a.min(F::zero());
    let c = c.max(F::zero());
    let levels = F::from((1u32 << k) - 1).unwrap();
    let s = (c - a) / levels;
    let lo = -(1i64 << (k - 1));
    let hi = (1i64 << (k - 1)) - 1;
    let z = -round_half_away(a * levels / (c - a)).to_i64().unwrap() - (1i64 << (k - 1));
    (s, z.clamp(lo, hi) as i32)
}

/// `clamp(round(x / s) + z)`.
pub fn oracle_quantize<F: Float>(x: F, s: F, z: i32, k: u32) -> i32 {
    let lo = -(1i64 << (k - 1)) as f64;
    let hi = ((1i64 << (k - 1)) - 1) as f64;
    let v = round_half_away(x / s) + F::from(z).unwrap();
    let v = v.to_f64().unwrap();
    v.max(lo).min(hi) as i32
}

/// `(q - z) · s`.
pub fn oracle_dequantize<F: Float>(q: i32, s: F, z: i32) -> F {
    F::from(q - z).unwrap() * s
}

/// A random toy architecture that is valid for its own input shape.
pub fn random_architecture(rng: &mut ChaCha8Rng) -> ToyArchitecture {
    loop {
        let c = rng.gen_range(1..=3);
        let hw = rng.gen_range(6..=12);
        let blocks: Vec<BlockSpec> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let kernel = [1, 3, 5][rng.gen_range(0..3)];
                BlockSpec {
                    out_channels: rng.gen_range(2..=6),
                    kernel,
                    stride: rng.gen_range(1..=2),
                    padding: Some(rng.gen_range(0..=kernel / 2)),
                    pool: rng.gen_bool(0.4).then(|| PoolSpec {
                        kind: if rng.gen_bool(0.5) { PoolKind::Max } else { PoolKind::Avg },
                        kernel: 2,
                        stride: rng.gen_range(1..=2),
                    }),
                }
            })
            .collect();
        let head = rng.gen_bool(0.6).then(|| HeadSpec {
            pool: None,
            linear_out: rng.gen_range(3..=7),
        });
        let arch = ToyArchitecture {
            input_shape: vec![c, hw, hw],
            blocks,
            head,
            bn_eps: 1e-5,
        };
        if build_toy_model::<f64>(&arch, 0).is_ok() {
            return arch;
        }
    }
}

/// A toy model with randomized running statistics, so that the BN loss has
/// no special structure.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelGraph<f64> {
    let arch = random_architecture(rng);
    let mut m: ModelGraph<f64> = build_toy_model(&arch, rng.gen()).unwrap();
    for &i in m.bn_indices().to_vec().iter() {
        let c = m.batch_norm(i).unwrap().channels();
        let mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let std = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        m = m.with_bn_stats(i, mean, std).unwrap();
    }
    m
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Loss value of `obj` at `x`.
pub fn loss_at<O: Objective<f64>>(model: &ModelGraph<f64>, x: &Tensor<f64>, obj: &O) -> f64 {
    zsq_core::grad_input(model, x, obj).unwrap().0
}

/// Central difference of the loss along direction `v`.
pub fn directional_fd<O: Objective<f64>>(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    v: &Tensor<f64>,
    obj: &O,
    h: f64,
) -> f64 {
    let shift = |sign: f64| {
        let data = x.data().iter().zip(v.data()).map(|(&a, &b)| a + sign * h * b).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    };
    (loss_at(model, &shift(1.0), obj) - loss_at(model, &shift(-1.0), obj)) / (2.0 * h)
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error between analytic and finite-difference derivatives
/// of `obj`: along `directions` random directions and `coords` single
/// coordinates. Coordinate checks use a floor of `1e-3 · max|g|` on the
/// denominator so that dead units (exact zeros) compare sensibly.
pub fn gradient_error<O: Objective<f64>>(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    obj: &O,
    rng: &mut ChaCha8Rng,
    directions: usize,
    coords: usize,
) -> f64 {
    const H: f64 = 1e-6;
    let (_, g) = zsq_core::grad_input(model, x, obj).unwrap();
    let gmax = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let v = gaussian_tensor(rng, x.shape().to_vec());
        let analytic = dot(&g, &v);
        let fd = directional_fd(model, x, &v, obj, H);
        let denom = analytic.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    for _ in 0..coords {
        let i = rng.gen_range(0..x.len());
        let v = Tensor::from_fn(x.shape().to_vec(), |j| if j == i { 1.0 } else { 0.0 });
        let fd = directional_fd(model, x, &v, obj, H);
        let analytic = g.data()[i];
        let denom = analytic.abs().max(fd.abs()).max(1e-3 * gmax).max(1e-12);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    worst
}
