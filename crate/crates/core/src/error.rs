use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },
    #[error("attribution error in layer {layer}: {reason}")]
    Attribution { layer: usize, reason: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
