use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("device {device}: infinite processing time (zero MES allocation for an offloader)")]
    ZeroAllocation { device: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("class index {class} out of range for {n} devices")]
    ClassOutOfRange { class: usize, n: usize },

    #[error("{n} devices exceeds the {max}-device limit of the {solver} solver")]
    TooManyDevices {
        solver: &'static str,
        n: usize,
        max: usize,
    },

    #[error("dataset generation aborted: {discarded} of {drawn} drawn scenarios were infeasible")]
    PathologicalRanges { discarded: usize, drawn: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidScenario(_) => "invalid_scenario",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ZeroAllocation { .. } => "zero_allocation",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ClassOutOfRange { .. } => "class_out_of_range",
            Error::TooManyDevices { .. } => "too_many_devices",
            Error::PathologicalRanges { .. } => "pathological_ranges",
            Error::Diverged { .. } => "diverged",
            Error::Parse { .. } => "parse",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
