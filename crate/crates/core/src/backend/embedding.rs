use std::time::Duration;

use serde_json::json;

use super::http::{lookup_path, RetryPolicy};
use super::BackendError;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

/// Deterministic stand-in for a learned text encoder: lowercase tokens are
/// hashed (FNV-1a) into a fixed number of buckets and the count vector is
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBagOfWords { dim }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in token.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        (hash % self.dim as u64) as usize
    }
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingBackend for HashedBagOfWords {
    fn id(&self) -> &str {
        "hashed-bow"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let mut values = vec![0.0; self.dim];
        for t in &tokens {
            values[self.bucket(t)] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(EmbeddingVector { values })
    }
}

/// Embedding endpoint speaking the common `{"model", "input"}` request shape.
pub struct HttpEmbeddingBackend {
    id: String,
    endpoint: String,
    model: String,
    auth_header: String,
    token: Option<String>,
    response_path: String,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingBackend {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        model: impl Into<String>,
        auth_header: impl Into<String>,
        token_env: Option<&str>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpEmbeddingBackend {
            id: id.into(),
            endpoint: endpoint.into(),
            model: model.into(),
            auth_header: auth_header.into(),
            token: token_env.and_then(|name| std::env::var(name).ok()),
            response_path: "/data/0/embedding".into(),
            retry: RetryPolicy::default(),
            client,
        })
    }

    pub fn with_response_path(mut self, path: impl Into<String>) -> Self {
        self.response_path = path.into();
        self
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let body = json!({ "model": self.model, "input": text });
        let value = self.retry.run(|| {
            super::http::post_json(&self.client, &self.endpoint, &self.auth_header, self.token.as_deref(), &body)
        })?;
        let values = lookup_path(&value, &self.response_path)
            .and_then(|v| v.as_array())
            .ok_or_else(|| BackendError::MalformedResponse(format!("no array at {}", self.response_path)))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::MalformedResponse("non-numeric embedding value".into())))
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(BackendError::MalformedResponse("empty embedding".into()));
        }
        Ok(EmbeddingVector { values })
    }
}
