use thiserror::Error;

/// Harness failures, each mapped to a process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("engine failure: {0}")]
    Engine(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Check(_) => 3,
            HarnessError::Engine(_) | HarnessError::Io(_) => 4,
        }
    }
}

impl From<zofed_core::ZofedError> for HarnessError {
    fn from(e: zofed_core::ZofedError) -> Self {
        match e {
            zofed_core::ZofedError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Engine(other.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
