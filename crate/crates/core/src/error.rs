use thiserror::Error;

use crate::collectives::CollectiveKind;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or parameters that can never work together.
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },

    /// Ranks disagreed about the collective they were executing.
    #[error("protocol error at collective #{seq} on rank {rank}: {detail}")]
    Protocol { rank: usize, seq: u64, detail: String },

    /// A rank is waiting on a collective that can never complete.
    #[error("deadlock at collective #{seq} on rank {rank}: {detail}")]
    Deadlock { rank: usize, seq: u64, detail: String },

    /// Another rank failed and the group was torn down.
    #[error("rank {rank} aborted: {detail}")]
    PeerFailed { rank: usize, detail: String },

    /// Backward called without the matching forward state.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("cost model has no entry for {0}")]
    UnknownCollective(String),

    #[error("fit failed for {collective}: {reason}")]
    Fit {
        collective: CollectiveKind,
        reason: String,
    },

    /// The finite-difference oracle saw a non-finite loss.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Config {
        op,
        detail: detail.into(),
    }
}
