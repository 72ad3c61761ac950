//! Model interchange, toy-model construction, synthetic data and BN-statistic
//! absorption.

pub mod absorb;
pub mod dataset;
pub mod format;
pub mod toy;

pub use absorb::{absorb_bn_stats, DEFAULT_MOMENTUM};
pub use dataset::{replicate_channels, GeneratorKind, SyntheticDataset};
pub use format::{load_model, save_model, ModelManifest};
pub use toy::{build_toy_model, BlockSpec, HeadSpec, PoolKind, PoolSpec, ToyArchitecture};
