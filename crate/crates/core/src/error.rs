use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is numerically singular (pivot magnitude {pivot:e})")]
    Singular { pivot: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("layer {layer}: previous factor L is numerically singular")]
    SingularPrev { layer: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("operation requires a lip-mode model with certificate matrices")]
    ModeError,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("row {row}: expected {expected} samples, found {found}")]
    LengthMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("certificate mismatch: {0}")]
    CertificateMismatch(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::SingularPrev { .. } => Error::SingularPrev { layer },
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }

    /// Strips any layer context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
