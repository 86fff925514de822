use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value outside an operation's domain, e.g. `log` of a non-positive entry.
    #[error("domain error in {op} at index {index} (value {value})")]
    Domain { op: &'static str, index: usize, value: f64 },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric that is undefined for the given input, e.g. AUROC with a single class.
    #[error("degenerate metric: {0}")]
    Degenerate(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    /// Training produced a non-finite objective.
    #[error("non-finite objective at epoch {epoch}, batch {batch}: {msg}")]
    NumericFailure { epoch: usize, batch: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.as_ref().display().to_string(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
