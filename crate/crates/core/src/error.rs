use std::path::PathBuf;

use thiserror::Error;

use crate::schema::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid record {id}: {report}")]
    InvalidRecord { id: String, report: ValidationReport },

    #[error("empty fit set")]
    EmptyFitSet,

    #[error("insufficient regular samples: need {required}, have {available}")]
    InsufficientRegulars { required: usize, available: usize },

    #[error("insufficient detained samples: need {required}, have {available}")]
    InsufficientDetained { required: usize, available: usize },

    #[error("csv line {line}, column `{column}`: {message}")]
    Csv {
        line: u64,
        column: String,
        message: String,
    },

    #[error("branch absent: model was built in RSR mode")]
    BranchAbsent,

    #[error("margin loss needs both classes")]
    SingleClassBatch,

    #[error("metric needs both classes")]
    SingleClassMetric,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("group protocol: {0}")]
    Group(String),

    #[error("response parse: {0}")]
    Parse(#[from] crate::grouprank::ParseError),

    #[error("remote backend failed after {attempts} attempts: {reason}; last response: {last_response:?}")]
    Remote {
        attempts: usize,
        reason: String,
        last_response: Option<String>,
    },

    #[error("remote backend timed out after {attempts} attempts")]
    Timeout { attempts: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed input data rather than runtime
    /// or backend failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidRecord { .. }
                | Error::Csv { .. }
                | Error::EmptyFitSet
                | Error::InsufficientRegulars { .. }
                | Error::InsufficientDetained { .. }
                | Error::SingleClassMetric
                | Error::Group(_)
        )
    }
}
