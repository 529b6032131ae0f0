use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transport error: {0}")]
    Io(#[from] io::Error),

    #[error("peer rank {rank} disconnected")]
    PeerDisconnected { rank: usize },

    #[error("timed out after {millis} ms waiting for {what}")]
    Timeout { what: String, millis: u128 },

    #[error("barrier timed out; absent ranks: {absent:?}")]
    BarrierTimeout { absent: Vec<usize> },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("gradient pool error: {0}")]
    Pool(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("region {start}..{end} is already borrowed")]
    RegionBusy { start: usize, end: usize },
}

impl Error {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
