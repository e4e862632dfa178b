use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    /// A documented precondition was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary input (IDX containers).
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// NaN or infinity detected; the payload names where.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted because the loss or a gradient stopped being finite.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
