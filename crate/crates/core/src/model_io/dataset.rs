//! Deterministic synthetic image sets used in place of real training data.
//!
//! Every image is a pure function of `(kind, seed, index, size)`, so any
//! slice of the set can be regenerated independently and in any order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorKind {
    /// Every pixel equals `value`.
    Constant { value: f32 },
    /// Independent per-channel Gaussian pixels.
    Gaussian { means: Vec<f32>, scales: Vec<f32> },
    /// Scene-structured images: consecutive images share a scene (brightness,
    /// contrast, gradient direction, blob layout); each pixel is
    /// `mean[c] + scale[c] · pattern`, plus Gaussian sensor noise.
    Structured {
        means: Vec<f32>,
        scales: Vec<f32>,
        #[serde(default = "default_scene_length")]
        scene_length: usize,
        #[serde(default = "default_blobs")]
        blobs: usize,
        #[serde(default = "default_noise")]
        noise: f32,
    },
}

fn default_scene_length() -> usize {
    12
}

fn default_blobs() -> usize {
    3
}

fn default_noise() -> f32 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub generator: GeneratorKind,
    pub seed: u64,
    /// Number of images in the set.
    pub count: usize,
    /// 1 (single-channel, thermal-like) or 3.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Stream offset separating per-scene draws from per-image draws.
const SCENE_STREAM: u64 = 1 << 40;

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "dataset channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("dataset image size must be positive".into()));
        }
        let per_channel = |m: &[f32], s: &[f32]| -> Result<()> {
            if m.len() != self.channels || s.len() != self.channels {
                return Err(Error::InvalidConfig(format!(
                    "means/scales need {} entries",
                    self.channels
                )));
            }
            if s.iter().any(|&v| !(v > 0.0)) || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("scales must be positive and means finite".into()));
            }
            Ok(())
        };
        match &self.generator {
            GeneratorKind::Constant { value } if !value.is_finite() => {
                Err(Error::InvalidConfig("constant value must be finite".into()))
            }
            GeneratorKind::Constant { .. } => Ok(()),
            GeneratorKind::Gaussian { means, scales } => per_channel(means, scales),
            GeneratorKind::Structured {
                means,
                scales,
                scene_length,
                ..
            } => {
                if *scene_length == 0 {
                    return Err(Error::InvalidConfig("scene_length must be positive".into()));
                }
                per_channel(means, scales)
            }
        }
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    /// Images `[start, start + count)` as an `(N, C, H, W)` tensor in the
    /// dataset's native channel count. Indices past `self.count` are allowed
    /// (they continue the same deterministic stream, used for held-out data).
    pub fn images<T: Real>(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        self.validate()?;
        if count == 0 {
            return Err(Error::Empty("requested zero images".into()));
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(count * self.channels * plane);
        for i in start..start + count {
            self.render(i, &mut data);
        }
        Tensor::new(
            vec![count, self.channels, self.height, self.width],
            data.into_iter().map(|v| T::of(v as f64)).collect(),
        )
    }

    /// Like [`images`](Self::images) but adapted to a model expecting
    /// `model_channels` inputs: single-channel data is replicated to three
    /// channels.
    pub fn model_batch<T: Real>(&self, start: usize, count: usize, model_channels: usize) -> Result<Tensor<T>> {
        let t = self.images(start, count)?;
        match (self.channels, model_channels) {
            (a, b) if a == b => Ok(t),
            (1, 3) => replicate_channels(&t),
            (a, b) => Err(Error::shape(
                None,
                format!("dataset has {a} channels, model expects {b}"),
            )),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn render(&self, index: usize, out: &mut Vec<f32>) {
        let (h, w) = (self.height, self.width);
        match &self.generator {
            GeneratorKind::Constant { value } => {
                out.extend(std::iter::repeat(*value).take(self.channels * h * w));
            }
            GeneratorKind::Gaussian { means, scales } => {
                let mut rng = self.rng(index as u64);
                for c in 0..self.channels {
                    for _ in 0..h * w {
                        let z: f64 = rng.sample(StandardNormal);
                        out.push((means[c] as f64 + scales[c] as f64 * z) as f32);
                    }
                }
            }
            GeneratorKind::Structured {
                means,
                scales,
                scene_length,
                blobs,
                noise,
            } => {
                let scene = Scene::draw(
                    &mut self.rng(SCENE_STREAM + (index / scene_length) as u64),
                    *blobs,
                    self.channels,
                );
                let mut rng = self.rng(index as u64);
                // Per-image jitter on top of the shared scene.
                let shift: f64 = 0.25 * rng.sample::<f64, _>(StandardNormal);
                let dx: f64 = rng.gen_range(-0.08..0.08);
                let dy: f64 = rng.gen_range(-0.08..0.08);
                let mut pattern = vec![0.0f64; h * w];
                for y in 0..h {
                    let v = (y as f64 + 0.5) / h as f64 - 0.5;
                    for x in 0..w {
                        let u = (x as f64 + 0.5) / w as f64 - 0.5;
                        let mut p = scene.brightness
                            + shift
                            + scene.gradient * 2.0 * (u * scene.angle.cos() + v * scene.angle.sin());
                        for b in &scene.blobs {
                            let (du, dv) = (u - b.u - dx, v - b.v - dy);
                            p += b.amplitude * (-(du * du + dv * dv) / (2.0 * b.radius * b.radius)).exp();
                        }
                        pattern[y * w + x] = scene.contrast * p;
                    }
                }
                for c in 0..self.channels {
                    let tint = scene.tint[c];
                    for &p in &pattern {
                        let z: f64 = rng.sample(StandardNormal);
                        let v = p + tint + *noise as f64 * z;
                        out.push((means[c] as f64 + scales[c] as f64 * v) as f32);
                    }
                }
            }
        }
    }
}

struct Blob {
    u: f64,
    v: f64,
    radius: f64,
    amplitude: f64,
}

struct Scene {
    brightness: f64,
    contrast: f64,
    gradient: f64,
    angle: f64,
    tint: Vec<f64>,
    blobs: Vec<Blob>,
}

impl Scene {
    fn draw(rng: &mut ChaCha8Rng, blobs: usize, channels: usize) -> Scene {
        // A mixture over scene types: mostly ordinary scenes, some dark/low
        // contrast and some bright/high contrast ones.
        let kind: f64 = rng.gen();
        let (b_mu, c_lo, c_hi) = if kind < 0.2 {
            (-0.5, 0.6, 0.9)
        } else if kind < 0.85 {
            (0.0, 0.8, 1.2)
        } else {
            (0.5, 1.1, 1.4)
        };
        let brightness = b_mu + 0.3 * rng.sample::<f64, _>(StandardNormal);
        let contrast = rng.gen_range(c_lo..c_hi);
        let gradient = rng.gen_range(0.2..1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let tint = (0..channels)
            .map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let blobs = (0..blobs)
            .map(|_| Blob {
                u: rng.gen_range(-0.4..0.4),
                v: rng.gen_range(-0.4..0.4),
                radius: rng.gen_range(0.04..0.18),
                amplitude: rng.gen_range(-1.0..1.6),
            })
            .collect();
        Scene {
            brightness,
            contrast,
            gradient,
            angle,
            tint,
            blobs,
        }
    }
}

/// Duplicates a single-channel batch `(N, 1, H, W)` into `(N, 3, H, W)`.
pub fn replicate_channels<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(
            None,
            format!("replicate_channels expects 1 channel, got {c}"),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * t.len());
    for i in 0..n {
        let src = &t.data()[i * plane..(i + 1) * plane];
        for _ in 0..3 {
            data.extend_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![n, 3, h, w], data))
}

/// Raw little-endian `f32` dump of a tensor (no header).
pub fn export_raw<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|v| v.as_f32().to_le_bytes())
        .collect();
    container::write_atomic(path.as_ref(), &bytes)
}

/// Min/max rescale to `0..=255`; a constant plane maps to mid-gray.
pub fn to_gray_u8<T: Real>(values: &[T]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v.as_f64() - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary (P5) 8-bit PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(None, "pixel count differs from width × height"));
    }
    container::write_atomic(path.as_ref(), &encode_pgm(width, height, pixels))
}

/// Writes one PGM per image per channel, `<prefix>_<image>_c<channel>.pgm`.
/// Returns the written paths.
pub fn export_pgm_channels<T: Real>(t: &Tensor<T>, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let (n, c, h, w) = t.dims4()?;
    let mut written = Vec::new();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * h * w;
            let path = dir.as_ref().join(format!("{prefix}_{i:04}_c{ch}.pgm"));
            write_pgm(&path, w, h, &to_gray_u8(&t.data()[off..off + h * w]))?;
            written.push(path);
        }
    }
    Ok(written)
}
