//! Error types shared across the crate.

/// Crate-wide error enum. Variants map onto the failure classes of the
/// public operations: shape mismatches, invalid inputs, numeric blowups,
/// bad configuration, malformed knowledge graphs, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
