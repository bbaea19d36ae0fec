use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value is outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),
    /// Shapes or resolutions do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// An operation was invoked in a state that does not allow it.
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input rather than by a failure while running.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Structural(_) | Error::Precondition(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
