use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A problem, tile or knob setting violates a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// Buffers disagree with the shapes implied by the problem.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The peer buffer directory has no entry for a rank.
    #[error("peer directory has no buffers for rank {rank}")]
    Directory { rank: usize },

    /// A flag or completion counter was not satisfied within the wait budget.
    #[error("deadlock: rank {rank} tile {tile:?} waited on flag {flag} of board {board} after {polls} polls")]
    Deadlock {
        rank: usize,
        tile: (usize, usize),
        board: usize,
        flag: usize,
        polls: u64,
    },

    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A strategy produced values that disagree with the dense oracle.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
