use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("step index {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this graph; record a new forward pass first")]
    GraphConsumed,

    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGradient(String),

    #[error("style argument mismatch: {0}")]
    StyleMismatch(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::GraphConsumed => "graph_consumed",
            Error::MissingGradient(_) => "missing_gradient",
            Error::StyleMismatch(_) => "style_mismatch",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn ensure_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        })
    }
}
