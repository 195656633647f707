use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("dataset generation failed: {0}")]
    GenerationFailure(String),
    #[error("positive pairing failed: {0}")]
    PairingFailure(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
