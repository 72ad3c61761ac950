//! Synthetic calibration data from stored batch-norm statistics.
//!
//! A Gaussian-initialized input batch is optimized with Adam so that the
//! per-channel mean (and optionally standard deviation) of the tensor
//! entering every BN layer matches that layer's running statistics.

mod format;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use format::{load_batch, save_batch, BatchManifest};

use crate::error::{Error, Result};
use crate::forward::{grad_input_with_trace, ActivationTrace, Objective, ObjectiveGrad};
use crate::graph::ModelGraph;
use crate::scalar::Real;
use crate::tensor::{batch_stats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossMode {
    /// Match channel means only.
    #[serde(rename = "mean")]
    MeanOnly,
    /// Match channel means and standard deviations.
    #[default]
    #[serde(rename = "mean-std")]
    MeanAndStd,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::MeanOnly => "mean",
            LossMode::MeanAndStd => "mean-std",
        }
    }

    /// Default learning-rate drop iterations for this mode.
    pub fn default_drops(self) -> Vec<usize> {
        match self {
            LossMode::MeanOnly => Vec::new(),
            LossMode::MeanAndStd => vec![20, 75],
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean-only" => Ok(LossMode::MeanOnly),
            "mean-std" | "mean+std" => Ok(LossMode::MeanAndStd),
            other => Err(Error::InvalidConfig(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub batch_size: usize,
    /// `(C, H, W)`; `None` takes the model's input shape.
    pub input_shape: Option<Vec<usize>>,
    pub iterations: usize,
    pub loss_mode: LossMode,
    pub lr0: f64,
    /// `None` uses [`LossMode::default_drops`].
    pub lr_drop_iters: Option<Vec<usize>>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            batch_size: 8,
            input_shape: None,
            iterations: 500,
            loss_mode: LossMode::MeanAndStd,
            lr0: 0.1,
            lr_drop_iters: None,
            lr_drop_factor: 5.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl DistillConfig {
    pub fn new(loss_mode: LossMode, iterations: usize, seed: u64) -> Self {
        DistillConfig {
            loss_mode,
            iterations,
            seed,
            ..Default::default()
        }
    }

    pub fn drops(&self) -> Vec<usize> {
        self.lr_drop_iters
            .clone()
            .unwrap_or_else(|| self.loss_mode.default_drops())
    }

    /// Learning rate in effect for the update at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let n = self.drops().iter().filter(|&&d| iteration >= d).count();
        self.lr0 / self.lr_drop_factor.powi(n as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad("lr drop factor must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be positive");
        }
        Ok(())
    }

    /// Copy with `input_shape` filled in from `model` (after checking it).
    pub fn resolved<T: Real>(&self, model: &ModelGraph<T>) -> Result<DistillConfig> {
        self.validate()?;
        let shape = match &self.input_shape {
            Some(s) if s.as_slice() != model.input_shape() => {
                return Err(Error::InvalidConfig(format!(
                    "distillation shape {s:?} differs from model input {:?}",
                    model.input_shape()
                )))
            }
            _ => model.input_shape().to_vec(),
        };
        Ok(DistillConfig {
            input_shape: Some(shape),
            lr_drop_iters: Some(self.drops()),
            ..self.clone()
        })
    }
}

/// Loss value split into its two components, each already divided by `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mean_term: f64,
    pub std_term: f64,
}

/// Squared gaps at one BN layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub mean_term: f64,
    pub std_term: f64,
}

/// One record per completed iteration; the loss is that of the input the
/// update at this iteration started from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,total,mean_term,std_term\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.iteration, r.lr, r.total, r.mean_term, r.std_term
            ));
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledBatch<T> {
    pub data: Tensor<T>,
    pub config: DistillConfig,
    /// Loss of `data` itself (after the last update).
    pub final_loss: f64,
    pub residuals: Vec<LayerResidual>,
}

/// The distillation objective as an [`Objective`] over BN taps.
#[derive(Debug)]
pub struct BnStatisticsLoss<'m, T> {
    model: &'m ModelGraph<T>,
    mode: LossMode,
}

impl<'m, T: Real> BnStatisticsLoss<'m, T> {
    pub fn new(model: &'m ModelGraph<T>, mode: LossMode) -> Result<Self> {
        if model.bn_indices().is_empty() {
            return Err(Error::NoBatchNorm);
        }
        Ok(BnStatisticsLoss { model, mode })
    }

    /// Loss components and per-layer residuals without gradients.
    pub fn parts(&self, trace: &ActivationTrace<T>) -> Result<(LossParts, Vec<LayerResidual>)> {
        let mut res = Vec::with_capacity(self.model.bn_indices().len());
        for &b in self.model.bn_indices() {
            let tap = trace.tap(b).ok_or(Error::MissingTap(b))?;
            let bn = self.model.batch_norm(b).expect("bn index");
            let (m, sd) = batch_stats(tap)?;
            let sq = |xs: &[T], ys: &[T]| {
                xs.iter()
                    .zip(ys)
                    .fold(0.0, |acc, (&x, &y)| acc + (x - y).as_f64().powi(2))
            };
            res.push(LayerResidual {
                layer: b,
                mean_gap: sq(&m, &bn.running_mean),
                std_gap: sq(&sd, &bn.running_std),
            });
        }
        let l = res.len() as f64;
        let mean_term = res.iter().map(|r| r.mean_gap).sum::<f64>() / l;
        let std_term = res.iter().map(|r| r.std_gap).sum::<f64>() / l;
        let total = match self.mode {
            LossMode::MeanOnly => mean_term,
            LossMode::MeanAndStd => mean_term + std_term,
        };
        Ok((
            LossParts {
                total,
                mean_term,
                std_term,
            },
            res,
        ))
    }
}

impl<'m, T: Real> Objective<T> for BnStatisticsLoss<'m, T> {
    fn uses_output(&self) -> bool {
        false
    }

    fn evaluate(&self, trace: &ActivationTrace<T>, _: Option<&Tensor<T>>) -> Result<ObjectiveGrad<T>> {
        let inv_l = T::one() / T::of(self.model.bn_indices().len() as f64);
        let two = T::of(2.0);
        let mut loss = T::zero();
        let mut tap_grads = BTreeMap::new();
        for &b in self.model.bn_indices() {
            let tap = trace.tap(b).ok_or(Error::MissingTap(b))?;
            let bn = self.model.batch_norm(b).expect("bn index");
            let (n, c, h, w) = tap.dims4()?;
            let (m, sd) = batch_stats(tap)?;
            let count = T::of((n * h * w) as f64);
            let mut gm = Vec::with_capacity(c);
            let mut gs = Vec::with_capacity(c);
            for ch in 0..c {
                let dm = m[ch] - bn.running_mean[ch];
                loss = loss + dm * dm * inv_l;
                gm.push(two * dm * inv_l / count);
                if self.mode == LossMode::MeanAndStd {
                    let ds = sd[ch] - bn.running_std[ch];
                    loss = loss + ds * ds * inv_l;
                    gs.push(two * ds * inv_l / (count * sd[ch]));
                } else {
                    gs.push(T::zero());
                }
            }
            let plane = h * w;
            let data = tap.data();
            let g = Tensor::from_fn(tap.shape().to_vec(), |i| {
                let ch = (i / plane) % c;
                gm[ch] + gs[ch] * (data[i] - m[ch])
            });
            tap_grads.insert(b, g);
        }
        Ok(ObjectiveGrad {
            loss,
            tap_grads,
            output_grad: None,
        })
    }
}

/// Distillation loss of a captured trace.
pub fn bn_statistics_loss<T: Real>(trace: &ActivationTrace<T>, model: &ModelGraph<T>, mode: LossMode) -> Result<f64> {
    Ok(BnStatisticsLoss::new(model, mode)?.parts(trace)?.0.total)
}

/// Loss parts and residuals of `input` under `model`.
pub fn evaluate_batch<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    mode: LossMode,
) -> Result<(LossParts, Vec<LayerResidual>)> {
    let obj = BnStatisticsLoss::new(model, mode)?;
    let trace = crate::forward::capture_taps(model, input)?;
    obj.parts(&trace)
}

fn gaussian_input<T: Real>(cfg: &DistillConfig, shape: &[usize]) -> Tensor<T> {
    let mut full = vec![cfg.batch_size];
    full.extend_from_slice(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Tensor::from_fn(full, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(v)
    })
}

/// Runs Adam on the input batch for `cfg.iterations` steps.
pub fn distill<T: Real>(model: &ModelGraph<T>, cfg: &DistillConfig) -> Result<(DistilledBatch<T>, LossTrace)> {
    let obj = BnStatisticsLoss::new(model, cfg.loss_mode)?;
    let cfg = cfg.resolved(model)?;
    let mut x: Tensor<T> = gaussian_input(&cfg, model.input_shape());
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let eps = T::of(cfg.adam_eps);
    let mut m = vec![T::zero(); x.len()];
    let mut v = vec![T::zero(); x.len()];
    let mut trace = LossTrace::default();
    let diverged = |iteration: usize, trace: &LossTrace| Error::Divergence {
        iteration,
        trace: Box::new(trace.clone()),
    };

    for it in 0..cfg.iterations {
        let (_, grad, taps) = match grad_input_with_trace(model, &x, &obj) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(diverged(it, &trace)),
            Err(e) => return Err(e),
        };
        let (parts, _) = obj.parts(&taps)?;
        let lr = cfg.lr_at(it);
        trace.records.push(TraceRecord {
            iteration: it,
            lr,
            total: parts.total,
            mean_term: parts.mean_term,
            std_term: parts.std_term,
        });
        let t = (it + 1) as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::of(lr);
        for (((xi, &g), mi), vi) in x.data_mut().iter_mut().zip(grad.data()).zip(&mut m).zip(&mut v) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *xi = *xi - lr * mhat / (vhat.sqrt() + eps);
        }
        if !x.is_finite() {
            return Err(diverged(it, &trace));
        }
    }

    let (parts, residuals) = match evaluate_batch(model, &x, cfg.loss_mode) {
        Ok(r) => r,
        Err(Error::NonFinite { .. }) => return Err(diverged(cfg.iterations, &trace)),
        Err(e) => return Err(e),
    };
    if !parts.total.is_finite() {
        return Err(diverged(cfg.iterations, &trace));
    }
    Ok((
        DistilledBatch {
            data: x,
            config: cfg,
            final_loss: parts.total,
            residuals,
        },
        trace,
    ))
}

/// The `N(0, 1)` starting batch of [`distill`], unoptimized.
pub fn gaussian_baseline<T: Real>(model: &ModelGraph<T>, cfg: &DistillConfig) -> Result<DistilledBatch<T>> {
    let cfg = DistillConfig {
        iterations: 0,
        ..cfg.resolved(model)?
    };
    let x: Tensor<T> = gaussian_input(&cfg, model.input_shape());
    let (parts, residuals) = evaluate_batch(model, &x, cfg.loss_mode)?;
    Ok(DistilledBatch {
        data: x,
        config: cfg,
        final_loss: parts.total,
        residuals,
    })
}

/// `count` independent runs with seeds `cfg.seed + i`, in index order.
pub fn distill_many<T: Real>(
    model: &ModelGraph<T>,
    cfg: &DistillConfig,
    count: usize,
) -> Result<Vec<(DistilledBatch<T>, LossTrace)>> {
    if count == 0 {
        return Err(Error::InvalidConfig("batch count must be >= 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let c = DistillConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            distill(model, &c)
        })
        .collect()
}
