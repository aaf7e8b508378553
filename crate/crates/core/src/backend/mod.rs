//! Pluggable respondent backends. A backend receives a fully rendered prompt
//! (plus its structured condition context) and returns a raw free-text reply,
//! exactly as a survey participant would.

pub mod scripted;
pub mod synthetic;

mod http;

pub use http::HttpBackend;
pub use scripted::ScriptedBackend;
pub use synthetic::{BiasProfile, SyntheticRespondent};

pub use crate::chat::GenerationParams;

use thiserror::Error;

use crate::perturb::{PerturbationKind, PerturbedCondition};

/// One interview cell handed to a backend: the prompt to answer plus the
/// structured context it was rendered from.
#[derive(Clone, Copy, Debug)]
pub struct InterviewRequest<'a> {
    pub question_id: &'a str,
    pub kind: PerturbationKind,
    /// Zero-based repetition index within the cell's repetition block.
    pub repetition: u32,
    pub rendered_prompt: &'a str,
    pub condition: &'a PerturbedCondition,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient failure (network, rate limiting, timeout): the cell can be
    /// retried by a resume run.
    #[error("transport failure: {0}")]
    Transport(String),
    /// Permanent failure for this request (bad credentials, rejected input,
    /// missing script entry): retrying the identical request cannot succeed.
    #[error("generation failure: {0}")]
    Generation(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A survey respondent. Implementations must be shareable across worker
/// threads; interior rate limiting is the backend's own business.
pub trait RespondentBackend: Send + Sync {
    /// Stable name used in records, reports, and file names.
    fn name(&self) -> &str;

    /// Answers one interview prompt, returning the raw reply text.
    fn respond(
        &self,
        request: &InterviewRequest<'_>,
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    /// Whether responses are a pure function of the request (no wall-clock,
    /// no external service). Deterministic backends get zeroed timing fields
    /// in the journal so reruns are byte-identical.
    fn deterministic(&self) -> bool {
        true
    }
}
