use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} has {available} samples but {needed} were requested")]
    InsufficientClassSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("complement target {target} is below the real count {count} of class {class}")]
    TargetBelowCount {
        class: usize,
        count: usize,
        target: usize,
    },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("unknown augmentation policy `{0}`")]
    UnknownPolicy(String),

    #[error("unknown loss variant `{0}`")]
    UnknownVariant(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("empty dataset: {0}")]
    Empty(&'static str),

    #[error("manifest line {line}: {message}")]
    MalformedManifest { line: usize, message: String },

    #[error("blob dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed blob: {0}")]
    MalformedBlob(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("non-finite value produced by `{op}` during {pass}")]
    NonFinite { op: &'static str, pass: &'static str },

    #[error("anchor {anchor} has no positives")]
    EmptyPositives { anchor: usize },

    #[error("empty reference set for nearest-neighbour vote")]
    EmptyReference,

    #[error("class {class}: only {accepted} of {wanted} synthetic samples passed the quality filter after {attempts} attempts")]
    UnmeetableTarget {
        class: usize,
        wanted: usize,
        accepted: usize,
        attempts: usize,
    },

    #[error("checkpoint does not match architecture: {0}")]
    ArchMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
