use thiserror::Error;

/// Errors raised by the estimation library and CLI.
#[derive(Debug, Error)]
pub enum DseError {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("metering plan error: {0}")]
    Plan(String),

    #[error("observability error: {0}")]
    Observability(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate scaling-factor denominator (|sum| = {magnitude:e})")]
    DegenerateDenominator { magnitude: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse error class used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Runtime => 4,
        }
    }
}

impl DseError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            DseError::Usage(_) | DseError::Argument(_) => ErrorCategory::Usage,
            DseError::Topology(_)
            | DseError::Validation(_)
            | DseError::Plan(_)
            | DseError::Observability(_)
            | DseError::Data(_)
            | DseError::Io(_)
            | DseError::Json(_)
            | DseError::Csv(_) => ErrorCategory::Data,
            DseError::Shape { .. }
            | DseError::DegenerateDenominator { .. }
            | DseError::Numerical(_) => ErrorCategory::Runtime,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        DseError::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DseError>;
