use thiserror::Error;

/// Errors raised anywhere in the measurement, classification and protocol
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("signal too short: need {needed} samples, got {got}")]
    Truncation { needed: usize, got: usize },

    #[error("insufficient decay range: {0}")]
    Range(String),

    #[error("class balance: {0}")]
    Class(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("measurement failed: {0}")]
    Measurement(String),

    #[error("wav format: {0}")]
    Format(String),

    #[error("message authentication failed")]
    Authentication,

    #[error("nonce mismatch, treating report as a replay")]
    Replay,

    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),

    #[error("malformed message: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures that abort a protocol session (as opposed to
    /// measurement or configuration problems).
    pub fn is_protocol_abort(&self) -> bool {
        matches!(
            self,
            Error::Authentication | Error::Replay | Error::ProtocolOrder(_) | Error::Wire(_)
        )
    }
}

impl From<hound::Error> for Error {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => Error::Io(e),
            other => Error::Format(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
