//! Distilled batch files: header `ZSQD 1 <len>`, JSON manifest holding the
//! config snapshot, then the `(N, C, H, W)` tensor as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistillConfig, DistilledBatch, LayerResidual};
use crate::container::{self, BlobReader, BlobRef, BlobWriter};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BATCH_MAGIC: &str = "ZSQD";
pub const BATCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format_version: u32,
    pub config: DistillConfig,
    pub final_loss: f64,
    pub residuals: Vec<LayerResidual>,
    pub data: BlobRef,
    pub crc32: u32,
}

pub fn save_batch<T: Real>(batch: &DistilledBatch<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut blob = BlobWriter::default();
    let data = blob.push_f32(batch.data.shape(), batch.data.data().iter().map(|v| v.as_f32()));
    let blob = blob.finish();
    let manifest = BatchManifest {
        format_version: BATCH_FORMAT_VERSION,
        config: batch.config.clone(),
        final_loss: batch.final_loss,
        residuals: batch.residuals.clone(),
        data,
        crc32: container::crc32(&blob),
    };
    let bytes = container::encode(BATCH_MAGIC, BATCH_FORMAT_VERSION, &manifest, &blob)?;
    container::write_atomic(path.as_ref(), &bytes)
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<DistilledBatch<f32>> {
    let bytes = container::read(path.as_ref())?;
    let (m, blob): (BatchManifest, _) = container::decode(&bytes, BATCH_MAGIC, BATCH_FORMAT_VERSION)?;
    let reader = BlobReader::new(blob);
    reader.check_layout([&m.data])?;
    if blob.len() != m.data.length {
        return Err(Error::Manifest("blob length differs from tensor size".into()));
    }
    let actual = container::crc32(blob);
    if actual != m.crc32 {
        return Err(Error::Checksum {
            expected: m.crc32,
            actual,
        });
    }
    if m.data.shape.len() != 4 {
        return Err(Error::Manifest(format!("batch shape {:?} is not rank 4", m.data.shape)));
    }
    let data = Tensor::new(m.data.shape.clone(), reader.f32s(&m.data)?)?;
    Ok(DistilledBatch {
        data,
        config: m.config,
        final_loss: m.final_loss,
        residuals: m.residuals,
    })
}
