use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which term of the training objective went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Supervised,
    Regularizer,
}

impl std::fmt::Display for LossComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossComponent::Supervised => f.write_str("supervised"),
            LossComponent::Regularizer => f.write_str("regularizer"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: graph contains a cycle at node {0}")]
    Cycle(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient at sampler iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss {
        component: LossComponent,
        iteration: usize,
    },

    #[error("particle set anchor does not match the supplied image")]
    AnchorMismatch,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("need at least 2 particles, got {0}")]
    TooFewParticles(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset not found at {0}")]
    MissingDataset(PathBuf),

    #[error("{path}: {reason} (offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint/dataset mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
