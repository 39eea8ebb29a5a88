use std::io;

use thiserror::Error;

use crate::wire::{PayloadKind, StreamError, WireError};

/// Errors raised by registration, point-to-point and collective operations.
#[derive(Debug, Error)]
pub enum CommError {
    #[error("cannot bind head address {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("registration timed out: {arrived} of {expected} workers arrived")]
    RegistrationTimeout { arrived: u32, expected: u32 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("cannot connect to head at {addr}: {source}")]
    ConnectFailure { addr: String, source: io::Error },
    #[error("registration aborted: {0}")]
    Aborted(String),
    #[error("head closed the connection during registration")]
    HeadClosed,
    #[error("rank {rank} is outside a world of size {size}")]
    InvalidRank { rank: u32, size: u32 },
    #[error("rank {0} cannot send to itself")]
    SelfSend(u32),
    #[error("disconnected: {0}")]
    Disconnected(String),
    #[error("reduction kind mismatch: expected {expected:?}, got {found:?}")]
    KindMismatch {
        expected: PayloadKind,
        found: PayloadKind,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl From<StreamError> for CommError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Wire(w) => CommError::Wire(w),
            StreamError::Io(e) => CommError::Io(e),
            StreamError::Closed => CommError::Disconnected("connection closed".into()),
        }
    }
}

pub type Result<T, E = CommError> = std::result::Result<T, E>;
