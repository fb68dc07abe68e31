use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("buffer-empty: the replay buffer holds no rollouts")]
    BufferEmpty,
    #[error("no-reference: no stored rollout for question {0}")]
    NoReference(u64),
    #[error("chain-finished: the prefix already ends with a terminal step")]
    ChainFinished,
    #[error("incomplete-chain: the chain does not end with a terminal step")]
    IncompleteChain,
    #[error("illegal step: {0}")]
    IllegalStep(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("invalid rollout: {0}")]
    InvalidRollout(String),
    #[error("group-too-small: need at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("support-mismatch: rollout {0} has zero probability under the current policy")]
    SupportMismatch(usize),
    #[error("diverged: non-finite {0}")]
    Diverged(&'static str),
    #[error("beam-shape: width {width} does not divide beam size {n}")]
    BeamShape { n: usize, width: usize },
    #[error("too-large-to-enumerate: {0}")]
    TooLargeToEnumerate(String),
    #[error("unlearnable-seed: no correct rollout found for any question; try an easier spec")]
    UnlearnableSeed,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("unknown method: {0}")]
    UnknownMethod(String),
    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
