use thiserror::Error;

/// Unified error type for the simulator core.
///
/// `Config` and `Schema` indicate bad inputs that should be fixed by the
/// caller; everything else is a runtime fault.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity. `context` names the layer or
    /// operation that first observed the fault.
    #[error("numeric fault in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Structural problem with a wire frame: bad magic, unknown version or
    /// message type, truncated or oversized sections.
    #[error("framing error: {0}")]
    Framing(String),

    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed CSV row. Line numbers are 1-based and count the header.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A metric has no defined value on the given inputs, e.g. AUC with a
    /// single class present.
    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn framing(msg: impl Into<String>) -> Self {
        Error::Framing(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}
