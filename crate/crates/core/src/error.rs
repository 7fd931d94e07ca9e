use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("degenerate comparison: {0}")]
    Degenerate(String),

    #[error("{model} (repetition {rep}): {source}")]
    Study {
        model: String,
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numeric blow-up (overflow, NaN, divergence).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::GradientMismatch(_) => true,
            Error::Study { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
