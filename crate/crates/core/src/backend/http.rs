use std::fmt;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};
use crate::domain::ImageRef;

/// Exponential backoff applied to transport failures only; HTTP error
/// statuses are returned immediately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << attempt.min(16)))
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Err(BackendError::Transport(msg)) if attempt + 1 < attempts => {
                    let wait = self.backoff(attempt);
                    log::debug!("transport error (attempt {}): {msg}; retrying in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_prefix() -> String {
    "Bearer ".into()
}

fn default_response_path() -> String {
    "/choices/0/message/content".into()
}

fn default_timeout() -> u64 {
    120
}

/// Connection settings for a chat-completion style endpoint. The token
/// itself is never part of the config; only the name of the environment
/// variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub id: String,
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_response_path")]
    pub response_path: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl HttpBackendConfig {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            id: id.into(),
            endpoint: endpoint.into(),
            model: model.into(),
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            token_env: None,
            response_path: default_response_path(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.config.id)
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let token = config.token_env.as_deref().and_then(|name| std::env::var(name).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { config, token, client })
    }

    /// JSON body sent for `request`.
    pub fn request_body(&self, request: &CompletionRequest) -> Result<Value, BackendError> {
        let messages = request
            .messages
            .iter()
            .map(|m| {
                let mut content = vec![json!({ "type": "text", "text": m.text })];
                match &m.image {
                    Some(img @ ImageRef::Path(_)) => {
                        let bytes = img.read_bytes()?.unwrap_or_default();
                        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                        content.push(json!({ "type": "image", "data": data }));
                    }
                    Some(ImageRef::Url(url)) => content.push(json!({ "type": "image", "url": url })),
                    None => {}
                }
                Ok(json!({ "role": m.role.as_str(), "content": content }))
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }))
    }
}

impl CompletionBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let started = Instant::now();
        let body = self.request_body(request)?;
        let token = self.token.as_ref().map(|t| format!("{}{t}", self.config.auth_prefix));
        let value = self
            .config
            .retry
            .run(|| post_json(&self.client, &self.config.endpoint, &self.config.auth_header, token.as_deref(), &body))?;
        let text = lookup_path(&value, &self.config.response_path)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::MalformedResponse(format!("no string at {}", self.config.response_path)))?;
        Ok(CompletionResponse {
            text: text.to_string(),
            backend_id: self.config.id.clone(),
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    auth_header: &str,
    auth_value: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut req = client.post(endpoint).json(body);
    if let Some(v) = auth_value {
        req = req.header(auth_header, v);
    }
    let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status();
    let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(BackendError::Refused { status: status.as_u16(), message: text });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

/// Resolve either a JSON pointer (`/choices/0/message/content`) or a dotted
/// path (`choices.0.message.content`).
pub(crate) fn lookup_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.starts_with('/') || path.is_empty() {
        value.pointer(path)
    } else {
        value.pointer(&format!("/{}", path.replace('.', "/")))
    }
}
