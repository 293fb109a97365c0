use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain.
    #[error("input domain: {0}")]
    InputDomain(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value at node `{node}`: {detail}")]
    Numeric { node: String, detail: String },

    /// An enumeration oracle was asked for an instance beyond its size guard.
    #[error("capacity: {0}")]
    Capacity(String),

    /// Cached state disagrees with what the operation expects.
    #[error("consistency: {0}")]
    Consistency(String),

    /// A configuration cannot be used as given.
    #[error("configuration: {0}")]
    Config(String),

    /// A file did not match the expected on-disk layout.
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::InputDomain(msg.into())
}
