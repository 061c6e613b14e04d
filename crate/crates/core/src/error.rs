//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter containers do not share the same layout.
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    /// A non-finite value appeared while evaluating the computation trace.
    #[error("non-finite value at trace node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// Tensor/sequence dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// An operation received an empty input it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A token id falls outside the model vocabulary.
    #[error("token id {id} out of vocabulary (words 1..={vocab})")]
    TokenOutOfVocab { id: u32, vocab: u32 },

    /// Confidence-filter thresholds must satisfy 0 <= low < high <= 1.
    #[error("invalid filter thresholds: low={low}, high={high}")]
    InvalidThresholds { low: f64, high: f64 },

    /// A weak label is missing a field the requested cost needs.
    #[error("weak label missing {0}")]
    MissingWeakField(&'static str),

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// EMA rate must lie strictly inside (0, 1).
    #[error("ema rate {0} outside (0, 1)")]
    InvalidEmaRate(f64),

    /// The divergence detector fired and the run was configured to abort.
    #[error("run aborted: divergence detected at round {round}")]
    DivergenceAbort { round: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
