use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("factorization failed after {retries} damping retries (final epsilon {final_eps:.3e})")]
    Factorization { retries: usize, final_eps: f64 },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("projection recording disabled; rerun with recording enabled to differentiate")]
    RecordingDisabled,

    #[error("implicit mode undefined for y-independent update map (restoration mode)")]
    ImplicitUndefined,

    #[error("projection did not converge: residual {residual:.3e} > tolerance {tol:.3e}")]
    NotConverged { residual: f64, tol: f64 },

    #[error("projection diverged: {details}")]
    Diverged { details: String },

    #[error("projection failed for batch sample {index}: {source}")]
    BatchProjection {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("training aborted at step {step}: non-finite loss (last good checkpoint retained)")]
    NonFiniteLoss { step: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
