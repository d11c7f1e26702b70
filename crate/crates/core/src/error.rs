use thiserror::Error;

/// Errors raised by memory tree mutations and queries.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    /// A referenced memory, branch or judgment target does not exist.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// The entity being created already exists.
    #[error("conflict: {0}")]
    Conflict(String),
    /// The request is malformed (empty selection, bad limit, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A structured plan failed validation.
    #[error("validation error: {0}")]
    Validation(String),
}

/// Errors from the analyzer adapter and its providers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzerError {
    /// Network or transport failure; the call may be retried.
    #[error("provider transport failure: {0}")]
    Transport(String),
    /// The provider answered, but the answer violates the module contract.
    #[error("provider output failed validation: {0}")]
    Validation(String),
    /// The caller supplied unusable input.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Provider is not configured (missing key, unknown model, ...).
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl AnalyzerError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, AnalyzerError::Transport(_))
    }
}

/// Errors from perceptual hashing and observation filtering.
#[derive(Debug, Error)]
pub enum FilterError {
    #[error("image could not be decoded: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Errors from the event log and blob store.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("replay failed at seq {seq}: {reason}")]
    Replay { seq: u64, reason: String },
    #[error("unknown blob {0}")]
    UnknownBlob(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Errors from the preference probe and its metrics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Top-level error surfaced by [`crate::engine::Session`].
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Errors from scoring and context assembly.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    /// The query has no tokens, so token overlap is undefined.
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}
