use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
