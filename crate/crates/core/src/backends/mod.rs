//! Call contracts for the four external models and their interchangeable
//! implementations: HTTP clients, scripted mocks, and cassette record/replay.
//!
//! Every backend instance is used by one caller at a time; concurrent
//! sequences get independent instances.

pub mod cassette;
pub mod http;
pub mod mock;
mod spec;
mod types;

use thiserror::Error;

pub use self::cassette::{CallKind, Cassette, CassetteEntry, CassetteRecorder, Recording, Replaying};
pub use self::spec::{BackendSet, BackendSpecs, EmbedderSpec, GrounderSpec, MllmSpec, TrackerSpec};
pub use self::types::{
    ChatRequest, Embedder, FeatureVector, Grounder, GroundingResult, Mllm, SessionHandle, TrackerPrediction,
    VisualTracker,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request rejected{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Rejected { status: Option<u16>, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("tracker session lost; re-initialisation required")]
    SessionLost,
    #[error("cassette digest mismatch at call {index} ({kind}): recorded {expected}, got {actual}")]
    DigestMismatch { index: usize, kind: String, expected: String, actual: String },
    #[error("cassette exhausted at call {index}")]
    CassetteExhausted { index: usize },
    #[error("cassette i/o: {0}")]
    CassetteIo(String),
    #[error("scripted {0} backend has no more responses")]
    ScriptExhausted(&'static str),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether the retry policy applies.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout)
    }
}
