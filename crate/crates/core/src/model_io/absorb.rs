//! Populating batch-norm running statistics from data without training.

use crate::error::{Error, Result};
use crate::forward::apply_layer;
use crate::graph::{Layer, ModelGraph};
use crate::model_io::dataset::SyntheticDataset;
use crate::scalar::Real;
use crate::tensor::{batch_stats, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Runs the dataset through the model in training-mode batch norm (each BN
/// layer normalizes with the current batch's statistics) and folds every
/// batch's per-channel mean and std into the running statistics:
/// `running = (1 - momentum) · running + momentum · batch`.
///
/// Conv and linear weights are left untouched.
pub fn absorb_bn_stats<T: Real>(
    model: &ModelGraph<T>,
    data: &SyntheticDataset,
    momentum: f64,
    batch_size: usize,
) -> Result<ModelGraph<T>> {
    if data.count == 0 {
        return Err(Error::Empty("dataset has no images".into()));
    }
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "momentum must be in (0, 1], got {momentum}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let model_channels = model.input_shape()[0];
    if &model.input_shape()[1..] != [data.height, data.width].as_slice() {
        return Err(Error::shape(
            None,
            format!(
                "dataset images are {}x{}, model expects {:?}",
                data.height,
                data.width,
                model.input_shape()
            ),
        ));
    }

    let m = T::of(momentum);
    let keep = T::one() - m;
    let mut running: Vec<(Vec<T>, Vec<T>)> = model
        .bn_indices()
        .iter()
        .map(|&i| {
            let bn = model.batch_norm(i).expect("bn index");
            (bn.running_mean.clone(), bn.running_std.clone())
        })
        .collect();

    let last_bn = model.bn_indices().last().copied();
    let mut start = 0;
    while start < data.count {
        let count = batch_size.min(data.count - start);
        let mut x: Tensor<T> = data.model_batch(start, count, model_channels)?;
        let mut slot = 0;
        for (i, layer) in model.layers().iter().enumerate() {
            if Some(i) > last_bn {
                break;
            }
            x = match layer {
                Layer::BatchNorm2d(bn) => {
                    let (mean, std) = batch_stats(&x)?;
                    let (rm, rs) = &mut running[slot];
                    for c in 0..mean.len() {
                        rm[c] = keep * rm[c] + m * mean[c];
                        rs[c] = keep * rs[c] + m * std[c];
                    }
                    slot += 1;
                    normalize_with(&x, &mean, &std, &bn.gamma, &bn.beta, bn.eps)?
                }
                _ => apply_layer(model, i, &x)?,
            };
        }
        start += count;
    }

    let mut out = model.clone();
    for (&i, (mean, std)) in model.bn_indices().iter().zip(running) {
        if std.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::NonFinite { layer: Some(i) });
        }
        out = out.with_bn_stats(i, mean, std)?;
    }
    Ok(out)
}

fn normalize_with<T: Real>(x: &Tensor<T>, mean: &[T], std: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let ch = i % c;
        let scale = gamma[ch] / (std[ch] * std[ch] + eps).sqrt();
        for v in chunk {
            *v = scale * (*v - mean[ch]) + beta[ch];
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }
    Ok(out)
}
