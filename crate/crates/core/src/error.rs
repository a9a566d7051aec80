use std::path::PathBuf;

use crate::autodiff::TensorError;
use crate::rewards::RewardError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of length {len} exceeds context length {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("reward tokens already added to this model")]
    VocabAlreadyExtended,
    #[error("model has no reward tokens")]
    NoRewardTokens,
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("pool of {size} examples cannot be split into {k} quantiles")]
    PoolTooSmall { size: usize, k: usize },
    #[error("quantile {0} is empty")]
    EmptyQuantile(usize),
    #[error("pool has not been quantized")]
    NotQuantized,
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("corpus of {len} tokens is shorter than one window of {window}")]
    CorpusTooShort { len: usize, window: usize },
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{what} at line {line}: {detail}")]
    Parse {
        what: &'static str,
        line: usize,
        detail: String,
    },
}

impl Error {
    /// Whether the error stems from invalid configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::TrainConfig(_) | Error::ModelConfig(_))
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
