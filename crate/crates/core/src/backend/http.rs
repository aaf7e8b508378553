//! Live respondent backed by a chat-completions HTTP endpoint.

use crate::chat::{ChatClient, ChatError, EndpointConfig, GenerationParams};

use super::{BackendError, InterviewRequest, RespondentBackend};

/// Respondent that sends each rendered prompt as a single user message to a
/// chat-completions endpoint and returns the assistant reply verbatim.
pub struct HttpBackend {
    name: String,
    client: ChatClient,
}

impl HttpBackend {
    /// Builds the backend, resolving credentials from the environment
    /// variable named in the config. Fails fast when the variable is unset so
    /// a misconfigured run dies before any interview is attempted.
    pub fn new(name: impl Into<String>, config: EndpointConfig) -> Result<Self, BackendError> {
        let client = ChatClient::new(config).map_err(map_chat_error)?;
        Ok(Self {
            name: name.into(),
            client,
        })
    }
}

fn map_chat_error(error: ChatError) -> BackendError {
    if error.is_transport() {
        BackendError::Transport(error.to_string())
    } else {
        BackendError::Generation(error.to_string())
    }
}

impl RespondentBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn respond(
        &self,
        request: &InterviewRequest<'_>,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.client
            .complete(request.rendered_prompt, params)
            .map_err(map_chat_error)
    }

    /// Live endpoints are not reproducible: timing fields are recorded.
    fn deterministic(&self) -> bool {
        false
    }
}
