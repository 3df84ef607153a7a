use std::path::PathBuf;

use crate::model::AttentionSite;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values in {phase} state at step {step}")]
    NonFinite { phase: &'static str, step: usize },

    #[error("non-finite model output at t = {t}")]
    NonFiniteOutput { t: f64 },

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("no edit tokens found: source and target prompts tokenize identically")]
    NoEditTokens,

    #[error("degenerate mask: {0}; supply an explicit mask or edit-word override")]
    DegenerateMask(String),

    #[error("no cache entry for {0}")]
    MissingCacheEntry(AttentionSite),

    #[error("cache entry for {0} written twice")]
    DuplicateCacheEntry(AttentionSite),

    #[error("sampling interval [{t_from}, {t_to}] has no matching interval in the source cache")]
    TimestepMismatch { t_from: f64, t_to: f64 },

    #[error("controller returned a mis-shaped {tensor} at {site}: expected {expected:?}, got {got:?}")]
    ControllerShape {
        site: AttentionSite,
        tensor: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("attention probabilities for {0} were not captured during a forward pass")]
    ProbabilitiesUnavailable(String),

    #[error("training diverged at step {0}")]
    Diverged(usize),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Walks through phase wrappers to the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
