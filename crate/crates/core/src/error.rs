use thiserror::Error;

use crate::correct::SubgroupKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: u64, field: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("zero variance in both groups; the test statistic is undefined")]
    ZeroVariance,

    #[error("no donors available for subgroup {0} (fallback ladder exhausted)")]
    NoDonors(SubgroupKey),

    #[error("target delta_miss {target} is not achievable; achievable range is ({low}, {high})")]
    Unachievable { target: f64, low: f64, high: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: u64, field: &str, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}
