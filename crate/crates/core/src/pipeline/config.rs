//! Experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{RangeMethod, RangeSelector, WeightGranularity};
use crate::distill::{DistillConfig, LossMode};
use crate::error::{Error, Result};
use crate::model_io::{SyntheticDataset, ToyArchitecture};

/// The shipped reference experiment.
pub const REFERENCE_TOML: &str = include_str!("../../configs/reference.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_absorb_batch")]
    pub absorb_batch_size: usize,
    pub architecture: ToyArchitecture,
}

fn default_momentum() -> f64 {
    crate::model_io::DEFAULT_MOMENTUM
}

fn default_absorb_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    #[serde(flatten)]
    pub config: DistillConfig,
    /// Number of batches the end-to-end run distills.
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationSource {
    /// Batches distilled from the model's BN statistics.
    #[default]
    Distilled,
    /// Consecutive slices of the synthetic training set.
    SyntheticTrain,
    /// Unoptimized `N(0, 1)` batches.
    Gaussian,
}

impl CalibrationSource {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationSource::Distilled => "distilled",
            CalibrationSource::SyntheticTrain => "synthetic-train",
            CalibrationSource::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for CalibrationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distilled" => Ok(CalibrationSource::Distilled),
            "synthetic-train" | "train" => Ok(CalibrationSource::SyntheticTrain),
            "gaussian" => Ok(CalibrationSource::Gaussian),
            other => Err(Error::InvalidConfig(format!("unknown calibration source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSection {
    #[serde(default)]
    pub source: CalibrationSource,
    #[serde(flatten)]
    pub method: RangeMethod,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default)]
    pub weights: WeightGranularity,
}

fn default_bits() -> u32 {
    8
}

impl CalibrationSection {
    pub fn selector(&self) -> Result<RangeSelector> {
        RangeSelector::new(self.method, self.bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub batches: usize,
    pub batch_size: usize,
    /// First held-out dataset index.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSection {
    /// Calibration batches per arm.
    pub batches: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub iterations: Vec<usize>,
    pub modes: Vec<LossMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub model: ModelSection,
    pub dataset: SyntheticDataset,
    pub distill: DistillSection,
    pub calibration: CalibrationSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
    pub ablation: AblationSection,
}

impl PipelineConfig {
    pub fn reference() -> Self {
        Self::parse(REFERENCE_TOML).expect("shipped reference config is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.dataset.validate()?;
        self.distill.config.validate()?;
        self.calibration.selector()?;
        if !(2..=8).contains(&self.calibration.bits) {
            return bad(format!("bits must be in [2, 8], got {}", self.calibration.bits));
        }
        let arch = &self.model.architecture;
        if arch.input_shape.len() != 3 {
            return bad(format!("architecture input shape {:?} is not (C, H, W)", arch.input_shape));
        }
        if arch.input_shape[1..] != [self.dataset.height, self.dataset.width] {
            return bad("dataset image size differs from the model input".into());
        }
        let (mc, dc) = (arch.input_shape[0], self.dataset.channels);
        if !(mc == dc || (dc == 1 && mc == 3)) {
            return bad(format!("dataset has {dc} channels, model expects {mc}"));
        }
        if self.distill.count == 0 || self.eval.batches == 0 || self.eval.batch_size == 0 {
            return bad("batch counts and sizes must be positive".into());
        }
        if self.compare.batches == 0 || self.compare.iterations == 0 {
            return bad("compare section needs positive batches and iterations".into());
        }
        if self.ablation.iterations.iter().any(|&i| i == 0) {
            return bad("ablation iteration counts must be positive".into());
        }
        if self.model.absorb_batch_size == 0 {
            return bad("absorb batch size must be positive".into());
        }
        Ok(())
    }

    /// Distillation settings with `iterations` overridden.
    pub fn distill_config(&self, iterations: usize, mode: LossMode) -> DistillConfig {
        DistillConfig {
            iterations,
            loss_mode: mode,
            // The drop schedule follows the mode unless pinned explicitly.
            lr_drop_iters: self.distill.config.lr_drop_iters.clone(),
            ..self.distill.config.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }
}
