//! Blocking client for chat-completion style HTTP endpoints.
//!
//! One client instance serves one endpoint; it enforces a cap on concurrent
//! requests and retries transient failures (network errors, HTTP 429, HTTP
//! 5xx) with exponential backoff. Authentication failures and other 4xx
//! responses are returned immediately. The API credential is read from an
//! environment variable named in the config at construction time; it is never
//! written to config files or logs.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::util::Semaphore;

/// Where and how to reach a chat-completion endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL up to (not including) `/chat/completions`.
    pub base_url: String,
    /// Model identifier sent with every request.
    pub model: String,
    /// Name of the environment variable holding the API key. Only the name
    /// is stored; the key itself stays out of files and logs.
    pub api_key_env: String,
    /// Maximum concurrent in-flight requests against this endpoint.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_max_in_flight() -> usize {
    4
}

/// Sampling and transport parameters applied to every generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    /// Number of retries after the first attempt for transient failures.
    pub retries: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            // No principled default exists for survey interviews; 1.0 is an
            // arbitrary, documented choice that callers should pin per
            // experiment.
            temperature: 1.0,
            max_tokens: 64,
            timeout_secs: 60,
            retries: 3,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ChatError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ChatError::InvalidParams {
                message: format!("temperature must be >= 0, got {}", self.temperature),
            });
        }
        if self.max_tokens == 0 {
            return Err(ChatError::InvalidParams {
                message: "max_tokens must be > 0".to_string(),
            });
        }
        if self.timeout_secs == 0 {
            return Err(ChatError::InvalidParams {
                message: "timeout_secs must be > 0".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("credential environment variable {env} is not set")]
    MissingCredential { env: String },
    #[error("invalid generation params: {message}")]
    InvalidParams { message: String },
    #[error("failed to build HTTP client: {source}")]
    Client {
        #[source]
        source: reqwest::Error,
    },
    #[error("endpoint rejected authentication (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint rejected the request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("transport failed after {attempts} attempts: {last_error}")]
    Transport { attempts: u32, last_error: String },
    #[error("malformed completion payload: {message}")]
    Malformed { message: String },
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
}

impl ChatError {
    /// True when the failure happened at the transport level (after retries)
    /// rather than being a definitive endpoint verdict.
    pub fn is_transport(&self) -> bool {
        matches!(self, ChatError::Transport { .. })
    }
}

/// A configured connection to one chat-completion endpoint.
pub struct ChatClient {
    config: EndpointConfig,
    api_key: String,
    http: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl ChatClient {
    /// Builds the client, reading the credential from the environment. Fails
    /// fast when the variable is missing so no request is ever attempted
    /// without authentication.
    pub fn new(config: EndpointConfig) -> Result<Self, ChatError> {
        let api_key =
            std::env::var(&config.api_key_env).map_err(|_| ChatError::MissingCredential {
                env: config.api_key_env.clone(),
            })?;
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|source| ChatError::Client { source })?;
        let in_flight = Semaphore::new(config.max_in_flight.max(1));
        Ok(Self {
            config,
            api_key,
            http,
            in_flight,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Sends the prompt as a single user message and returns the first
    /// completion's text. Transient failures are retried with exponential
    /// backoff up to `params.retries` extra attempts.
    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, ChatError> {
        params.validate()?;
        let _permit = self.in_flight.acquire();
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let attempts = params.retries.saturating_add(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(attempt - 1));
            }
            let response = self
                .http
                .post(&url)
                .bearer_auth(&self.api_key)
                .timeout(Duration::from_secs(params.timeout_secs))
                .json(&body)
                .send();
            let response = match response {
                Ok(response) => response,
                Err(error) => {
                    // Network-level failure: connection refused, timeout, DNS.
                    last_error = error.to_string();
                    log::warn!("request attempt {} failed: {last_error}", attempt + 1);
                    continue;
                }
            };
            let status = response.status();
            if status.as_u16() == 401 || status.as_u16() == 403 {
                return Err(ChatError::Auth {
                    status: status.as_u16(),
                });
            }
            if status.as_u16() == 429 || status.is_server_error() {
                last_error = format!("HTTP {}", status.as_u16());
                log::warn!("request attempt {} got retryable {last_error}", attempt + 1);
                continue;
            }
            if !status.is_success() {
                let body = truncate_for_log(&response.text().unwrap_or_default());
                return Err(ChatError::Rejected {
                    status: status.as_u16(),
                    body,
                });
            }
            let payload: Value = response.json().map_err(|error| ChatError::Malformed {
                message: error.to_string(),
            })?;
            return extract_completion_text(&payload);
        }
        Err(ChatError::Transport {
            attempts,
            last_error,
        })
    }
}

/// Delay before retry number `retry` (0-based): 500ms doubling, capped at 8s.
fn backoff_delay(retry: u32) -> Duration {
    let millis = 500u64.saturating_mul(1u64 << retry.min(4));
    Duration::from_millis(millis.min(8_000))
}

/// Pulls `choices[0].message.content` out of a chat-completion payload.
fn extract_completion_text(payload: &Value) -> Result<String, ChatError> {
    let content = payload
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|choices| choices.first())
        .and_then(|choice| choice.get("message"))
        .and_then(|message| message.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| ChatError::Malformed {
            message: "missing choices[0].message.content".to_string(),
        })?;
    if content.is_empty() {
        return Err(ChatError::EmptyCompletion);
    }
    Ok(content.to_string())
}

fn truncate_for_log(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let cut = body
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}…", &body[..cut])
    }
}
