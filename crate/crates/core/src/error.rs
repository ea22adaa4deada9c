use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
///
/// `Dimension` and `Contract` indicate caller bugs (bad shapes, violated
/// preconditions). `NonFinite` fires when a computed value or gradient is NaN
/// or infinite; the finiteness sweep runs after every tape operation, so the
/// message names the operation that produced the value. `DegenerateMass` is
/// the renormalized-loss guard for hypothesis lists whose total probability
/// underflows. `Resource` rejects requests whose cost would blow past a hard
/// budget (exhaustive enumeration, mostly).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate hypothesis mass: {0}")]
    DegenerateMass(String),
    #[error("resource budget exceeded: {0}")]
    Resource(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
