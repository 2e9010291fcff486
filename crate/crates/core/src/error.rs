use thiserror::Error;

/// Errors raised by the engine. Each variant maps to one failure class.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A node or reference that should exist does not.
    #[error("structural error: {0}")]
    Structural(String),
    /// A value is outside its allowed range or shape.
    #[error("validation error: {0}")]
    Validation(String),
    /// An operation was called outside its domain (e.g. on the root).
    #[error("domain error: {0}")]
    Domain(String),
    /// The configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_interval(what: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} {value} outside [0, 1]")))
    }
}
