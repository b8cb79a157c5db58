use thiserror::Error;

use crate::ClientId;

/// Errors raised anywhere in the protocol library and simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("client {0} is already registered")]
    DuplicateClient(ClientId),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {source_name} at byte {offset}: {message}")]
    ParseBinary {
        source_name: String,
        offset: usize,
        message: String,
    },

    #[error("parse error in {source_name} at line {line}: {message}")]
    ParseText {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("client {client}: {source}")]
    Client {
        client: ClientId,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn for_client(self, client: ClientId) -> Self {
        Error::Client {
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_round(self, round: u64) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
