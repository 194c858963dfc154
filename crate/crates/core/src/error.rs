use std::fmt;

/// Unrecoverable conditions. Every fallible call in the crate returns one of
/// these; backpressure is not an error and is reported as
/// [`PostResult::Retry`](crate::PostResult::Retry) instead.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("bad argument: {0}")]
    BadArg(String),
    #[error("resource exhausted: {0}")]
    Exhausted(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("resource in use: {0}")]
    InUse(String),
    #[error("double free: {0}")]
    DoubleFree(String),
    #[error("completion queue full (capacity {0})")]
    CqFull(usize),
    #[error("synchronizer signaled beyond its threshold of {0}")]
    SyncOverflow(usize),
    #[error("incoming message of {incoming} bytes does not fit a {capacity}-byte buffer")]
    Truncate { incoming: usize, capacity: usize },
    #[error("unknown remote key {0:#x}")]
    BadRkey(u64),
    #[error("access at offset {offset} of {len} bytes exceeds a {size}-byte registration")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("remote completion handle {0} is not registered")]
    UnknownRcomp(u32),
    #[error("a runtime is already active in this process")]
    AlreadyActive,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Transport(e.to_string())
    }
}

pub(crate) fn bad_arg(msg: impl Into<String>) -> Error {
    Error::BadArg(msg.into())
}

/// Outcome code carried by a [`Status`](crate::Status).
///
/// Delivered statuses always carry `Ok`: fatal conditions surface as
/// [`Error`] from the call that hit them and `Retry` only ever appears as a
/// posting result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorCode {
    #[default]
    Ok,
    Retry,
    Fatal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::Ok => "ok",
            ErrorCode::Retry => "retry",
            ErrorCode::Fatal => "fatal",
        })
    }
}
