//! Multimodal prompt alignment on a frozen toy dual encoder.
//!
//! Learnable textual context vectors and per-layer visual prompt tokens are
//! trained against a frozen text/image transformer pair with three
//! objectives: soft-hard textual prompt alignment, prototype-guided visual
//! alignment, and global plus top-k sparse local cross-modal alignment.

use std::path::{Path, PathBuf};

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod eval;
pub mod export;
pub mod prompts;
pub mod prototype;
pub mod tensorfile;
pub mod tokenizer;
pub mod train;

pub use mpaf_tensor as tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] mpaf_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no description for class {0:?} and no remote provider available")]
    MissingClass(String),
    #[error("class {0:?} has no samples")]
    EmptyClass(String),
    #[error("remote provider: {0}")]
    Remote(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    HashMismatch { checkpoint: String, dataset: String },
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("output directory {0} already exists (use --force)")]
    OutputExists(PathBuf),
}

impl Error {
    /// Stable short identifier for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Invalid(_) => "invalid",
            Error::MissingClass(_) => "missing_class",
            Error::EmptyClass(_) => "empty_class",
            Error::Remote(_) => "remote",
            Error::Checkpoint(_) => "checkpoint",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::OutputExists(_) => "output_exists",
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
