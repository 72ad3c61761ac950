use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error{}: {msg}", layer_suffix(*.layer))]
    Shape { layer: Option<usize>, msg: String },

    #[error("non-finite value produced{}", layer_suffix(*.layer))]
    NonFinite { layer: Option<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate clipping range [{a}, {c}]")]
    DegenerateRange { a: f64, c: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing tap for batch-norm layer {0}")]
    MissingTap(usize),

    #[error("distillation undefined: model has no batch-norm layers")]
    NoBatchNorm,

    #[error("distillation diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        trace: Box<crate::distill::LossTrace>,
    },

    #[error("missing ranges for: {}", .0.join(", "))]
    MissingRanges(Vec<String>),

    #[error("checksum mismatch: manifest {expected:08x}, blob {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("blob access out of bounds: {0}")]
    OutOfBounds(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!(" at layer {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn shape(layer: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Config,
            Error::NonFinite { .. } | Error::Divergence { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
