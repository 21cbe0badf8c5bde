//! Claims and per-claim evidence: JSON Lines ingestion, lookup, and
//! visual-entity detection clients.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{BackendError, RetryPolicy};
use crate::domain::{Claim, GoldLabel, ImageRef, Split};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} schema error(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Schema(Vec<LineError>),
}

impl IngestError {
    pub fn line_errors(&self) -> &[LineError] {
        match self {
            IngestError::Schema(errors) => errors,
            IngestError::FileUnreadable { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePage {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub claim_id: String,
    #[serde(default)]
    pub pages: Vec<EvidencePage>,
    #[serde(default)]
    pub visual_entities: Vec<String>,
}

/// Trim, drop empties, and remove case-insensitive duplicates keeping the
/// first spelling.
pub fn dedup_entities<I, S>(entities: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = HashSet::new();
    entities
        .into_iter()
        .filter_map(|e| {
            let e = e.as_ref().trim();
            (!e.is_empty() && seen.insert(e.to_lowercase())).then(|| e.to_string())
        })
        .collect()
}

/// Read-only map from claim id to its evidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvidenceStore {
    entries: BTreeMap<String, Evidence>,
    warnings: Vec<String>,
}

impl EvidenceStore {
    pub fn from_entries(entries: impl IntoIterator<Item = Evidence>) -> Self {
        let mut store = EvidenceStore::default();
        for e in entries {
            store.insert(e, None);
        }
        store
    }

    fn insert(&mut self, mut evidence: Evidence, line: Option<usize>) {
        evidence.visual_entities = dedup_entities(&evidence.visual_entities);
        let id = evidence.claim_id.clone();
        if self.entries.insert(id.clone(), evidence).is_some() {
            let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
            let msg = format!("duplicate evidence for claim {id}{at}; keeping the later entry");
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
    }

    pub fn lookup(&self, claim_id: &str) -> Option<&Evidence> {
        self.entries.get(claim_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Fraction of `claims` whose evidence has at least one page.
    pub fn coverage(&self, claims: &[Claim]) -> f64 {
        if claims.is_empty() {
            return 0.0;
        }
        let covered = claims
            .iter()
            .filter(|c| self.lookup(&c.id).is_some_and(|e| !e.pages.is_empty()))
            .count();
        covered as f64 / claims.len() as f64
    }
}

pub fn lookup<'a>(store: &'a EvidenceStore, claim_id: &str) -> Option<&'a Evidence> {
    store.lookup(claim_id)
}

pub(crate) fn read_file(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })
}

/// Non-blank lines with their 1-based numbers.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Deserialize every non-blank line as `T`, running `check` on each; all
/// failures are collected with their line numbers.
pub(crate) fn parse_jsonl_records<T: DeserializeOwned>(
    text: &str,
    mut check: impl FnMut(&T) -> Result<(), String>,
) -> Result<Vec<T>, IngestError> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (line, raw) in jsonl_lines(text) {
        match serde_json::from_str::<T>(raw) {
            Ok(rec) => match check(&rec) {
                Ok(()) => out.push(rec),
                Err(message) => errors.push(LineError { line, message }),
            },
            Err(e) => errors.push(LineError { line, message: e.to_string() }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(IngestError::Schema(errors))
    }
}

pub fn parse_evidence(text: &str) -> Result<EvidenceStore, IngestError> {
    let mut store = EvidenceStore::default();
    let mut errors = Vec::new();
    for (line, raw) in jsonl_lines(text) {
        match serde_json::from_str::<Evidence>(raw) {
            Ok(ev) => match check_evidence(&ev) {
                Ok(()) => store.insert(ev, Some(line)),
                Err(message) => errors.push(LineError { line, message }),
            },
            Err(e) => errors.push(LineError { line, message: e.to_string() }),
        }
    }
    if errors.is_empty() {
        Ok(store)
    } else {
        Err(IngestError::Schema(errors))
    }
}

fn check_evidence(ev: &Evidence) -> Result<(), String> {
    if ev.claim_id.trim().is_empty() {
        return Err("claim_id must be non-empty".into());
    }
    if let Some(i) = ev.pages.iter().position(|p| p.body.trim().is_empty()) {
        return Err(format!("page {} has an empty body", i + 1));
    }
    Ok(())
}

pub fn ingest_evidence(path: &Path) -> Result<EvidenceStore, IngestError> {
    parse_evidence(&read_file(path)?)
}

#[derive(Debug, Deserialize)]
struct RawClaim {
    id: String,
    caption: String,
    image: String,
    #[serde(default)]
    label: Option<GoldLabel>,
    #[serde(default)]
    split: Option<Split>,
}

pub fn parse_claims(text: &str) -> Result<Vec<Claim>, IngestError> {
    let mut claims = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (line, raw) in jsonl_lines(text) {
        let parsed = match serde_json::from_str::<RawClaim>(raw) {
            Ok(c) => c,
            Err(e) => {
                errors.push(LineError { line, message: e.to_string() });
                continue;
            }
        };
        if parsed.id.trim().is_empty() {
            errors.push(LineError { line, message: "id must be non-empty".into() });
            continue;
        }
        if parsed.caption.trim().is_empty() {
            errors.push(LineError { line, message: format!("claim {}: caption is empty", parsed.id) });
            continue;
        }
        if let Some(first) = seen.insert(parsed.id.clone(), line) {
            errors.push(LineError {
                line,
                message: format!("duplicate claim id {} (first seen on line {first})", parsed.id),
            });
            continue;
        }
        claims.push(Claim {
            id: parsed.id,
            caption: parsed.caption,
            image: ImageRef::parse(&parsed.image),
            gold_label: parsed.label,
            split: parsed.split,
        });
    }
    if errors.is_empty() {
        Ok(claims)
    } else {
        Err(IngestError::Schema(errors))
    }
}

pub fn load_claims(path: &Path) -> Result<Vec<Claim>, IngestError> {
    parse_claims(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntity {
    pub name: String,
    pub score: f64,
}

/// Service that names the entities visible in an image.
pub trait EntityClient: Send + Sync {
    fn detect(&self, image: &ImageRef) -> Result<Vec<ScoredEntity>, BackendError>;
}

/// Entity names ordered by descending confidence, deduplicated
/// case-insensitively.
pub fn detect_entities(image: &ImageRef, client: &dyn EntityClient) -> Result<Vec<String>, BackendError> {
    let mut found = client.detect(image)?;
    found.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dedup_entities(found.iter().map(|e| e.name.as_str())))
}

/// Fixed answers for tests and offline runs.
#[derive(Debug, Default)]
pub struct ScriptedEntityClient {
    by_image: HashMap<String, Vec<ScoredEntity>>,
    default: Vec<ScoredEntity>,
    fail: bool,
    calls: AtomicUsize,
}

impl ScriptedEntityClient {
    /// Returns `names` for every image, with descending scores in list order.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        ScriptedEntityClient {
            default: ranked(names),
            ..Default::default()
        }
    }

    pub fn failing() -> Self {
        ScriptedEntityClient { fail: true, ..Default::default() }
    }

    pub fn with_image<S: Into<String>>(mut self, image: &str, names: impl IntoIterator<Item = S>) -> Self {
        self.by_image.insert(image.to_string(), ranked(names));
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn ranked<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Vec<ScoredEntity> {
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| ScoredEntity { name: n.into(), score: 1.0 / (i as f64 + 1.0) })
        .collect()
}

impl EntityClient for ScriptedEntityClient {
    fn detect(&self, image: &ImageRef) -> Result<Vec<ScoredEntity>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail {
            return Err(BackendError::Transport("entity service unavailable".into()));
        }
        Ok(self.by_image.get(&image.to_string()).unwrap_or(&self.default).clone())
    }
}

/// Web-entity detection over an images:annotate style endpoint.
pub struct VisionEntityClient {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl VisionEntityClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://vision.googleapis.com/v1/images:annotate";

    pub fn new(endpoint: impl Into<String>, api_key_env: Option<&str>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(VisionEntityClient {
            endpoint: endpoint.into(),
            api_key: api_key_env.and_then(|name| std::env::var(name).ok()),
            retry: RetryPolicy::default(),
            client,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request_body(image: &ImageRef) -> Result<Value, BackendError> {
        let image_json = match image {
            ImageRef::Url(url) => json!({ "source": { "imageUri": url } }),
            path => {
                let bytes = path.read_bytes()?.unwrap_or_default();
                json!({ "content": base64::engine::general_purpose::STANDARD.encode(bytes) })
            }
        };
        Ok(json!({
            "requests": [{ "image": image_json, "features": [{ "type": "WEB_DETECTION" }] }]
        }))
    }
}

impl EntityClient for VisionEntityClient {
    fn detect(&self, image: &ImageRef) -> Result<Vec<ScoredEntity>, BackendError> {
        let body = Self::request_body(image)?;
        let url = match &self.api_key {
            Some(key) => format!("{}?key={key}", self.endpoint),
            None => self.endpoint.clone(),
        };
        let response = self.retry.run(|| {
            let resp = self
                .client
                .post(&url)
                .json(&body)
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(BackendError::Refused { status: status.as_u16(), message: text });
            }
            serde_json::from_str::<Value>(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
        })?;
        let entities = response
            .pointer("/responses/0/webDetection/webEntities")
            .and_then(Value::as_array)
            .map(|list| {
                list.iter()
                    .filter_map(|e| {
                        Some(ScoredEntity {
                            name: e.get("description")?.as_str()?.to_string(),
                            score: e.get("score").and_then(Value::as_f64).unwrap_or(0.0),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(entities)
    }
}
