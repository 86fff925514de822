use mmvm_core::Error as CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },
    /// Missing or unusable input data or result files.
    #[error("data error: {0}")]
    Data(String),
    /// A pipeline invariant failed; indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<CoreError> for HarnessError {
    fn from(source: CoreError) -> Self {
        HarnessError::Core { context: "error".into(), source }
    }
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data, 4 numeric, 1 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Internal(_) => 1,
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Core { source, .. } => match source {
                CoreError::Contract(_) => 2,
                CoreError::NumericFailure { .. } | CoreError::Domain { .. } => 4,
                CoreError::Shape { .. } | CoreError::Degenerate(_) | CoreError::Parse { .. } | CoreError::Io { .. } => 3,
            },
        }
    }
}

/// Attach context to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, CoreError> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| HarnessError::Core { context: what(), source })
    }
}
