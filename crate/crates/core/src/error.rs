use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (dimension mismatches, bad ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// The second-moment matrix is singular or too ill-conditioned to solve.
    #[error("singular moment matrix (condition estimate {condition:.3e})")]
    SingularMoment { condition: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    /// Assumption 1 fails for the eigen-direction the threshold depends on.
    #[error(
        "threshold undefined: projection of E[x y] on the new eigen-direction is {projection:.3e}"
    )]
    ZeroProjection { projection: f64 },

    #[error("training diverged in run `{run}` at epoch {epoch}")]
    TrainingDiverged { run: String, epoch: usize },

    /// A malformed input row (CSV ingestion); `row` is 1-based and counts the header.
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
