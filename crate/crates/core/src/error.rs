use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the disaggregation pipeline.
///
/// Each variant belongs to one of three classes (usage, data, numerical),
/// which the CLI maps onto its exit codes via [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("length mismatch in {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("series too short for {what}: need at least {needed} samples, found {found}")]
    TooShort {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("state label {label} out of range for {states} states")]
    LabelOutOfRange { label: usize, states: usize },

    #[error("timestep {index} is not covered by any prediction window")]
    CoverageGap { index: usize },

    #[error("mean shift did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("{path}: {malformed} of {total} lines are malformed (limit 1%)")]
    MalformedLines {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("appliance '{appliance}' not found in {house}")]
    MissingChannel { appliance: String, house: String },

    #[error("labels file not found: {0}")]
    MissingLabels(PathBuf),

    #[error("state sidecar not found: {0} (run `msdc extract-states` first)")]
    MissingSidecar(PathBuf),

    #[error("series do not overlap in time")]
    NoOverlap,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorClass::Usage,
            Error::NonConvergence { .. }
            | Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::DegenerateSeries(_)
            | Error::VerificationFailed(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
