//! Error taxonomy shared by the whole crate.

/// Errors produced by the library.
///
/// The variants map onto the distinct failure classes the tooling cares
/// about: bad call arguments, semantic validation failures (e.g. a matrix
/// that is not orthogonal within tolerance), malformed input files (with the
/// offending byte offset or line number in the message), schema lookups, and
/// plain I/O.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// A function was called with arguments outside its domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Input data failed a semantic validity check.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not conform to its declared format. The message carries a
    /// byte offset (binary formats) or a line number (text formats).
    #[error("format error: {0}")]
    Format(String),

    /// A named column or field was not found.
    #[error("schema error: {0}")]
    Schema(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
