use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the model, training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or hyperparameter inconsistency in a configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied an input that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// The frozen encoder produced unusable output.
    #[error("backend error: {0}")]
    Backend(String),

    /// A norm or denominator that must be positive was zero.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss or decoded feature became non-finite.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Metric undefined for the given labels (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("dataset integrity error: {0}")]
    DatasetIntegrity(String),

    /// Checkpoint was produced by a model with a different architecture.
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Format(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    /// Wraps an error with the pipeline stage that produced it.
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, skipping any stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}
