//! Deterministic toy CNNs: `(conv → BN → ReLU [→ pool]) × k` plus an
//! optional flatten/linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNorm2d, Conv2d, Layer, Linear, ModelGraph, Pool};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolSpec {
    fn layer<T>(&self) -> Layer<T> {
        let p = Pool {
            kernel: self.kernel,
            stride: self.stride,
        };
        match self.kind {
            PoolKind::Max => Layer::MaxPool2d(p),
            PoolKind::Avg => Layer::AvgPool2d(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Defaults to `kernel / 2` ("same" padding for odd kernels).
    #[serde(default)]
    pub padding: Option<usize>,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    pub linear_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyArchitecture {
    /// `(C, H, W)`.
    pub input_shape: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl ToyArchitecture {
    /// Three conv-BN-ReLU blocks (8, 16, 32 channels, 3×3 kernels) on a
    /// 3×32×32 input, max-pooling after the first two, and a 64-way linear head.
    pub fn reference() -> Self {
        let pool = Some(PoolSpec {
            kind: PoolKind::Max,
            kernel: 2,
            stride: 2,
        });
        let block = |c, pool| BlockSpec {
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: None,
            pool,
        };
        ToyArchitecture {
            input_shape: vec![3, 32, 32],
            blocks: vec![block(8, pool), block(16, pool), block(32, None)],
            head: Some(HeadSpec {
                pool: None,
                linear_out: 64,
            }),
            bn_eps: default_bn_eps(),
        }
    }
}

/// He-style uniform bound for ReLU networks.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound) as f32 as f64))
        .collect()
}

/// Builds a model with weights drawn deterministically from `seed`. Batch-norm
/// layers start at gamma 1, beta 0, mean 0, std 1.
pub fn build_toy_model<T: Real>(arch: &ToyArchitecture, seed: u64) -> Result<ModelGraph<T>> {
    if arch.blocks.is_empty() {
        return Err(Error::InvalidConfig("architecture needs at least one block".into()));
    }
    let [mut channels, _, _] = arch.input_shape[..] else {
        return Err(Error::InvalidConfig(format!(
            "input shape must be (C,H,W), got {:?}",
            arch.input_shape
        )));
    };
    if !(arch.bn_eps >= 0.0) {
        return Err(Error::InvalidConfig("bn_eps must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (i, b) in arch.blocks.iter().enumerate() {
        if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
            return Err(Error::InvalidConfig(format!("block {i} has a zero-sized parameter")));
        }
        let fan_in = channels * b.kernel * b.kernel;
        let bound = init_bound(fan_in);
        let w = uniform(&mut rng, b.out_channels * fan_in, bound);
        let bias = uniform(&mut rng, b.out_channels, 1.0 / (fan_in as f64).sqrt());
        layers.push(Layer::Conv2d(Conv2d {
            weight: Tensor::new(vec![b.out_channels, channels, b.kernel, b.kernel], w)?,
            bias,
            stride: b.stride,
            padding: b.padding.unwrap_or(b.kernel / 2),
        }));
        layers.push(Layer::BatchNorm2d(BatchNorm2d::identity(
            b.out_channels,
            T::of(arch.bn_eps),
        )));
        layers.push(Layer::Relu);
        if let Some(p) = &b.pool {
            layers.push(p.layer());
        }
        channels = b.out_channels;
    }
    if let Some(head) = &arch.head {
        if let Some(p) = &head.pool {
            layers.push(p.layer());
        }
        layers.push(Layer::Flatten);
        // Shape of the flattened features depends on the spatial path.
        let probe = ModelGraph::<T>::new(arch.input_shape.clone(), layers.clone())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let features = probe.output_shape()[0];
        if head.linear_out == 0 {
            return Err(Error::InvalidConfig("linear_out must be positive".into()));
        }
        let bound = init_bound(features);
        let w = uniform(&mut rng, head.linear_out * features, bound);
        let bias = uniform(&mut rng, head.linear_out, 1.0 / (features as f64).sqrt());
        layers.push(Layer::Linear(Linear {
            weight: Tensor::new(vec![head.linear_out, features], w)?,
            bias,
        }));
    }
    ModelGraph::new(arch.input_shape.clone(), layers).map_err(|e| Error::InvalidConfig(e.to_string()))
}
