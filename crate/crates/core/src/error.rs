use thiserror::Error;

use crate::backend::KeyId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("capacity exceeded: {needed} slots needed, {capacity} available")]
    CapacityExceeded { needed: usize, capacity: usize },

    #[error("key {0:?} is not among the ciphertext's key layers")]
    WrongKey(KeyId),

    #[error("operand key layers differ: {left:?} vs {right:?}")]
    KeyMismatch { left: Vec<KeyId>, right: Vec<KeyId> },

    #[error("ciphertext level exhausted (level {level}, {needed} required)")]
    LevelExhausted { level: u32, needed: u32 },

    #[error("bootstrap requires an encrypted ciphertext")]
    NotEncrypted,

    #[error("access violation: {0}")]
    AccessViolation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("protocol aborted: {0}")]
    ProtocolAborted(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
