use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("keyframe {index} is outside 1..={n}")]
    Index { index: usize, n: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("covariance is not symmetric positive definite: {0}")]
    Covariance(String),

    #[error("chain violation: {0}")]
    ChainViolation(String),

    /// Zero pivot during back substitution. `index` is the offending row
    /// (0-based within the matrix) or keyframe, depending on the caller.
    #[error("singular system at index {index}")]
    Singular { index: usize },

    #[error("singular normal matrix")]
    SingularNormal,

    /// Keyframe whose conditional cannot be formed (rank-deficient block).
    #[error("under-constrained: keyframe {index} has a singular conditional")]
    UnderConstrained { index: usize },

    #[error("cost diverged ({0})")]
    Divergence(f64),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Strips any iteration wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            e => e,
        }
    }
}
