use crate::nn::Params;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("loss must be a 1x1 scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { node: usize, op: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prior store has no entry for utterance `{id}` step {t}")]
    StoreMiss { id: String, t: usize },

    #[error("prior store entry for utterance `{id}` step {t} already written under epoch tag {tag}")]
    StoreImmutable { id: String, t: usize, tag: u64 },

    #[error("transcript needs at least {needed} frames but lattice has {frames}")]
    Infeasible { needed: usize, frames: usize },

    #[error("instance too large for exhaustive enumeration ({0} paths)")]
    TooLarge(u128),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Params> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures that come from numerics (NaN, divergence) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
