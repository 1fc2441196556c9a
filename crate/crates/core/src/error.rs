use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by tensor operations, warps, data loading and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("{op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    #[error("{op}: non-finite values")]
    NonFinite { op: &'static str },

    #[error("singular transform: |det| = {det:e} (needs > 1e-8)")]
    SingularTransform { det: f64 },

    #[error("degenerate transform: first column norm {norm:e} (needs >= 1e-8)")]
    DegenerateTransform { norm: f64 },

    #[error("idx parse error at byte {offset}: {kind}")]
    Idx { offset: u64, kind: IdxErrorKind },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("training diverged at epoch {epoch} (non-finite loss, parameters or transform)")]
    Divergence { epoch: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxErrorKind {
    BadMagic { expected: u32, found: u32 },
    Truncated { needed: u64, available: u64 },
    CountMismatch { images: u32, labels: u32 },
    LabelOutOfRange(u8),
}

impl std::fmt::Display for IdxErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IdxErrorKind::BadMagic { expected, found } => {
                write!(f, "bad magic 0x{found:08x}, expected 0x{expected:08x}")
            }
            IdxErrorKind::Truncated { needed, available } => {
                write!(f, "truncated payload: need {needed} bytes, have {available}")
            }
            IdxErrorKind::CountMismatch { images, labels } => {
                write!(f, "count mismatch: {images} images vs {labels} labels")
            }
            IdxErrorKind::LabelOutOfRange(l) => write!(f, "label {l} out of range"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt length at byte {offset}: {detail}")]
    CorruptLength { offset: u64, detail: String },
    #[error("unknown layer name `{0}`")]
    UnknownLayer(String),
    #[error("parameter set does not match spec: {0}")]
    ParamMismatch(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            detail: detail.into(),
        }
    }
}
