use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid {element}: {reason}")]
    Validation { element: String, reason: String },

    #[error("injections are unbalanced: sum = {imbalance:.3e}")]
    Unbalanced { imbalance: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{0} out of domain")]
    Domain(String),

    #[error("laplacian is singular: {0}")]
    Singular(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("power-flow jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },

    #[error("no line between buses {0} and {1}")]
    UnknownLine(usize, usize),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("inverse stability region is empty")]
    EmptyRegion,

    #[error("plan needs more than {0} stages")]
    StageLimitExceeded(usize),

    #[error("first stage could not be certified: {0}")]
    FirstStageUncertified(String),

    #[error("stage {stage} did not reach the switch tolerance within {horizon} s")]
    StageTimeout { stage: usize, horizon: f64 },

    #[error("optimizer did not converge in {0} iterations")]
    NotConverged(usize),
}

impl Error {
    pub(crate) fn validation(element: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            element: element.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for input or feasibility problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. }
            | Error::SingularJacobian { .. }
            | Error::Singular(_)
            | Error::NonFinite { .. }
            | Error::StageTimeout { .. }
            | Error::NotConverged(_) => 2,
            _ => 1,
        }
    }
}
