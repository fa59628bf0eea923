//! Error taxonomy shared across the library.
//!
//! Two failure families matter to callers: *contract violations* (the caller
//! broke an API precondition — mismatched shapes, missing gradients, an
//! element attached twice) and *input errors* (bad data from the outside
//! world — malformed task files, out-of-range token ids, truncated
//! checkpoints). IO and JSON failures pass through with context.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An API precondition was violated by the calling code.
    #[error("contract violation: {0}")]
    Contract(String),

    /// External data failed validation.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns a contract-violation error unless `cond` holds.
macro_rules! ensure_contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

/// Returns an input error unless `cond` holds.
macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Input(format!($($arg)*)));
        }
    };
}

pub(crate) use {ensure_contract, ensure_input};
