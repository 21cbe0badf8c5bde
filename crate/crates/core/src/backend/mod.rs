//! Completion and embedding backends.
//!
//! Every model call in the detector goes through [`CompletionBackend`]. Real
//! deployments use [`HttpBackend`]; tests script responses with
//! [`ScriptedBackend`]. Any backend can be wrapped in [`CachedBackend`], which
//! stores responses on disk keyed by a digest of the request.

mod cache;
mod embedding;
mod http;
mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, ImageRef};

pub use cache::{cache_key, CacheEntry, CacheStats, CachedBackend, ResponseCache};
pub use embedding::{cosine, EmbeddingBackend, EmbeddingVector, HashedBagOfWords, HttpEmbeddingBackend};
pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use mock::{ScriptRule, ScriptedBackend, ScriptedBackendSpec};

/// Decoding defaults: greedy, 256 output tokens.
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused request (status {status}): {message}")]
    Refused { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("no scripted response matches the request")]
    NoScriptMatch,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

impl From<DomainError> for BackendError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::ImageUnavailable(msg) => BackendError::ImageUnavailable(msg),
            other => BackendError::InvalidRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { role: Role::System, text: text.into(), image: None }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { role: Role::User, text: text.into(), image: None }
    }

    pub fn user_with_image(text: impl Into<String>, image: ImageRef) -> Self {
        Message { role: Role::User, text: text.into(), image: Some(image) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// Request with the default decoding settings.
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        CompletionRequest {
            model_id: model_id.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages must be non-empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be a finite value >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        let mut images = 0;
        for m in &self.messages {
            if m.image.is_some() {
                if m.role != Role::User {
                    return Err(BackendError::InvalidRequest(format!(
                        "image attached to a {} message",
                        m.role.as_str()
                    )));
                }
                images += 1;
            }
        }
        if images > 1 {
            return Err(BackendError::InvalidRequest("at most one image per request".into()));
        }
        Ok(())
    }

    /// All message texts joined by newlines; what scripted mocks match against.
    pub fn joined_text(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.messages.iter().find_map(|m| m.image.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// A chat (text-only) or vision (image + text) completion endpoint.
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Model identifier placed in requests built by the pipeline.
    fn model_id(&self) -> &str {
        self.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// Validate the request, then dispatch it.
pub fn complete(backend: &dyn CompletionBackend, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
    request.validate()?;
    backend.complete(request)
}

/// Embed non-empty text.
pub fn embed(backend: &dyn EmbeddingBackend, text: &str) -> Result<EmbeddingVector, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::EmptyText);
    }
    backend.embed(text)
}
