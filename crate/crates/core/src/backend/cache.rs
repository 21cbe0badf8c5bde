use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    model_id: &'a str,
    messages: Vec<KeyMessage<'a>>,
    // Bit pattern, so 0.0 and -0.0 or formatting quirks never collide.
    temperature_bits: u64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct KeyMessage<'a> {
    role: &'a str,
    text: &'a str,
    image_digest: Option<String>,
}

/// Hex SHA-256 over every field that can influence a completion, including
/// the content (not the name) of an attached local image.
pub fn cache_key(backend_id: &str, request: &CompletionRequest) -> Result<String, BackendError> {
    let messages = request
        .messages
        .iter()
        .map(|m| {
            Ok(KeyMessage {
                role: m.role.as_str(),
                text: &m.text,
                image_digest: m.image.as_ref().map(|i| i.content_digest()).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    let material = KeyMaterial {
        backend_id,
        model_id: &request.model_id,
        messages,
        temperature_bits: request.temperature.to_bits(),
        max_tokens: request.max_tokens,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response_text: String,
    pub created_at: String,
    pub backend_id: String,
}

/// One JSON file per key at `<dir>/<first two hex chars>/<digest>.json`.
/// No eviction.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        let shard = &digest[..2.min(digest.len())];
        self.dir.join(shard).join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        let raw = std::fs::read(self.path_for(digest)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry) if entry.request_digest == digest => Some(entry),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {digest}: {e}");
                None
            }
        }
    }

    /// Write-then-rename, so readers never observe a partial entry and a
    /// concurrent writer for the same key simply replaces an equal file.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let path = self.path_for(&entry.request_digest);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        serde_json::to_writer_pretty(&mut tmp, entry).map_err(std::io::Error::from)?;
        tmp.write_all(b"\n")?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

/// Serves repeated requests from a [`ResponseCache`]; only misses reach the
/// wrapped backend.
pub struct CachedBackend {
    inner: Arc<dyn CompletionBackend>,
    cache: ResponseCache,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, cache: ResponseCache) -> Self {
        CachedBackend {
            inner,
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }
}

impl CompletionBackend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let started = Instant::now();
        let key = cache_key(self.inner.id(), request)?;
        if let Some(entry) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResponse {
                text: entry.response_text,
                backend_id: entry.backend_id,
                cached: true,
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        self.cache.put(&CacheEntry {
            request_digest: key,
            response_text: response.text.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
            backend_id: response.backend_id.clone(),
        })?;
        Ok(response)
    }
}
