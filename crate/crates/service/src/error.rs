use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid: {0}")]
    Invalid(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("out of order: expected item {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },

    #[error("study {0} is still open")]
    StudyOpen(String),

    #[error("study {0} is closed")]
    StudyClosed(String),

    #[error("no records: {0}")]
    NoRecords(String),

    #[error("corrupt log {path}: line {line}: {message}")]
    CorruptLog { path: String, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] genclass::Error),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::OutOfOrder { .. } => "out_of_order",
            ServiceError::StudyOpen(_) => "study_open",
            ServiceError::StudyClosed(_) => "study_closed",
            ServiceError::NoRecords(_) => "no_records",
            ServiceError::CorruptLog { .. } => "corrupt_log",
            ServiceError::Io(_) => "io",
            ServiceError::Json(_) => "json",
            ServiceError::Core(_) => "core",
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
