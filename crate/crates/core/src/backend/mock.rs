use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};

/// One scripted reply: if `pattern` occurs anywhere in the request text,
/// answer with `response`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub response: String,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule { pattern: pattern.into(), response: response.into() }
    }
}

/// On-disk form of a scripted backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBackendSpec {
    #[serde(default = "default_mock_id")]
    pub id: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

fn default_mock_id() -> String {
    "mock".to_string()
}

/// Deterministic backend answering from an ordered rule list; first match
/// wins. Records every request it receives.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    default: Option<String>,
    calls: AtomicUsize,
    log: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Self {
        ScriptedBackend {
            id: id.into(),
            rules,
            default: None,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    pub fn from_spec(spec: ScriptedBackendSpec) -> Self {
        let mut b = ScriptedBackend::new(spec.id, spec.rules);
        b.default = spec.default;
        b
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)?;
        let spec: ScriptedBackendSpec = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidRequest(format!("mock script {}: {e}", path.display())))?;
        Ok(Self::from_spec(spec))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }

    fn answer(&self, request: &CompletionRequest) -> Option<&str> {
        let text = request.joined_text();
        self.rules
            .iter()
            .find(|r| text.contains(&r.pattern))
            .map(|r| r.response.as_str())
            .or(self.default.as_deref())
    }
}

impl CompletionBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("request log poisoned").push(request.clone());
        let text = self.answer(request).ok_or(BackendError::NoScriptMatch)?;
        Ok(CompletionResponse {
            text: text.to_string(),
            backend_id: self.id.clone(),
            cached: false,
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{complete, Message};

    fn req(text: &str) -> CompletionRequest {
        CompletionRequest::new("m", vec![Message::user(text)])
    }

    #[test]
    fn first_match_wins() {
        let b = ScriptedBackend::new(
            "mock",
            vec![
                ScriptRule::new("rightly used", "Yes, the image is rightly used."),
                ScriptRule::new("judge", "second"),
            ],
        );
        let r = complete(&b, &req("judge whether the image is rightly used")).unwrap();
        assert_eq!(r.text, "Yes, the image is rightly used.");
        assert!(!r.cached);
    }

    #[test]
    fn unmatched_uses_default_or_errors() {
        let strict = ScriptedBackend::new("mock", vec![ScriptRule::new("a", "b")]);
        assert!(matches!(complete(&strict, &req("zzz")), Err(BackendError::NoScriptMatch)));
        let lenient = ScriptedBackend::new("mock", vec![]).with_default("fallback");
        assert_eq!(complete(&lenient, &req("zzz")).unwrap().text, "fallback");
    }

    #[test]
    fn spec_json_format() {
        let spec: ScriptedBackendSpec = serde_json::from_str(
            r#"{"id":"vision-mock","rules":[{"match":"x","response":"y"}],"default":"d"}"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_spec(spec);
        assert_eq!(b.id(), "vision-mock");
        assert_eq!(complete(&b, &req("x")).unwrap().text, "y");
        assert_eq!(b.requests().len(), 1);
    }
}
