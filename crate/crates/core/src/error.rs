use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    Asymmetric(f64),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error(
        "correlation matrix is not positive semi-definite \
         (smallest eigenvalue {min_eigenvalue:.3e}, largest {max_eigenvalue:.3e})"
    )]
    InvalidCorrelation {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("invalid prior specification: {0}")]
    InvalidPrior(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing M-moment for component {component}, difference entry {index}")]
    MissingMoment { component: usize, index: usize },

    #[error("non-contiguous time grid: {0}")]
    NonContiguousGrid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
