use thiserror::Error;

/// Errors raised by oracles, engines and data handling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZofedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("oracle failure at client {client:?}, step {step:?}: {message}")]
    Oracle {
        client: Option<usize>,
        step: Option<u64>,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("ingestion error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Ingestion { row: Option<usize>, message: String },

    #[error("lower-level divergence: {0}")]
    Divergence(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ZofedError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn oracle(msg: impl Into<String>) -> Self {
        Self::Oracle {
            client: None,
            step: None,
            message: msg.into(),
        }
    }

    /// Attaches client and step context to an oracle failure; other variants pass through.
    pub fn at(self, client: usize, step: u64) -> Self {
        match self {
            Self::Oracle { message, .. } => Self::Oracle {
                client: Some(client),
                step: Some(step),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T, E = ZofedError> = std::result::Result<T, E>;
