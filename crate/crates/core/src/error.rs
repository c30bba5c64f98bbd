use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a single coalition could not be valued.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleErrorKind {
    ConnectionFailure,
    Timeout,
    MalformedResponse,
    Remote,
    Policy,
}

impl fmt::Display for OracleErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OracleErrorKind::ConnectionFailure => "connection failure",
            OracleErrorKind::Timeout => "timeout",
            OracleErrorKind::MalformedResponse => "malformed response",
            OracleErrorKind::Remote => "remote error",
            OracleErrorKind::Policy => "policy failure",
        };
        f.write_str(s)
    }
}

/// A failed coalition evaluation. Always carries the offending mask so a
/// caller can resume.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{kind} evaluating coalition mask {mask:#x}: {message}")]
pub struct OracleError {
    pub mask: u64,
    pub kind: OracleErrorKind,
    pub message: String,
}

impl OracleError {
    pub fn new(mask: u64, kind: OracleErrorKind, message: impl Into<String>) -> Self {
        OracleError {
            mask,
            kind,
            message: message.into(),
        }
    }

    /// Connection failures, timeouts and remote errors may succeed on retry.
    pub fn is_retryable(&self) -> bool {
        !matches!(self.kind, OracleErrorKind::MalformedResponse)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("player count {0} outside 1..=63")]
    PlayerCount(usize),
    #[error("mask {mask:#x} has bits outside a {n}-player game")]
    InvalidCoalition { mask: u64, n: usize },
    #[error("enumeration of 2^{n} coalitions exceeds the budget (n <= {max})")]
    Budget { n: usize, max: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("rank-deficient regression: {independent_rows} independent rows, need {required}")]
    RankDeficient {
        independent_rows: usize,
        required: usize,
    },
    #[error("dimension keys do not match: {0}")]
    KeyMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("backend failed on {} coalition(s): {source}", unevaluated.len())]
    Backend {
        /// Masks that still need a value; a re-run revisits exactly these.
        unevaluated: Vec<u64>,
        source: OracleError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
