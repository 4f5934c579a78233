use alloc::string::String;

/// Error type shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },
    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("rewriter failed: {0}")]
    Rewrite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
