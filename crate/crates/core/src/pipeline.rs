//! The detection process for a claim: internal check, external check,
//! composed reasoning.
//!
//! Stage failures degrade instead of aborting. A transport error in a stage
//! yields a `NonCompliant` outcome tagged `[error]`, and the claim's result
//! carries a `failure` note. The rest of the batch proceeds.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete, CompletionBackend, CompletionRequest, EmbeddingBackend, HashedBagOfWords, Message};
use crate::domain::{CheckOutcome, Claim, DetectionResult, ImageRef, ParseStatus, Stage, Verdict};
use crate::evidence::{detect_entities, EntityClient, EvidenceStore};
use crate::parallel::ordered_map;
use crate::parser::parse_verdict;
use crate::prompts::{EvidenceLimits, PromptCatalog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("results file line {line}: {message}")]
    Results { line: usize, message: String },
    #[error("no claims to process")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntitySource {
    Stored,
    Live,
    None,
}

impl std::str::FromStr for EntitySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stored" => Ok(EntitySource::Stored),
            "live" => Ok(EntitySource::Live),
            "none" => Ok(EntitySource::None),
            other => Err(format!("unknown entity source {other:?} (expected stored|live|none)")),
        }
    }
}

/// `Model` asks the chat backend to arbitrate whenever external evidence
/// exists; `Shortcut` always reuses the internal outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    Model,
    Shortcut,
}

impl std::str::FromStr for ComposeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(ComposeMode::Model),
            "shortcut" => Ok(ComposeMode::Shortcut),
            other => Err(format!("unknown compose mode {other:?} (expected model|shortcut)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_pages: usize,
    pub max_chars_per_page: usize,
    pub entity_source: EntitySource,
    pub compose_mode: ComposeMode,
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let limits = EvidenceLimits::default();
        PipelineConfig {
            max_pages: limits.max_pages,
            max_chars_per_page: limits.max_chars_per_page,
            entity_source: EntitySource::Stored,
            compose_mode: ComposeMode::Model,
            concurrency: 4,
        }
    }
}

impl PipelineConfig {
    fn limits(&self) -> EvidenceLimits {
        EvidenceLimits { max_pages: self.max_pages, max_chars_per_page: self.max_chars_per_page }
    }
}

pub struct PipelineContext {
    pub vision: Arc<dyn CompletionBackend>,
    pub chat: Arc<dyn CompletionBackend>,
    pub embedding: Arc<dyn EmbeddingBackend>,
    pub evidence: Arc<EvidenceStore>,
    pub catalog: Arc<PromptCatalog>,
    pub entity_client: Option<Arc<dyn EntityClient>>,
    pub config: PipelineConfig,
}

impl PipelineContext {
    pub fn new(vision: Arc<dyn CompletionBackend>, chat: Arc<dyn CompletionBackend>, evidence: Arc<EvidenceStore>) -> Self {
        PipelineContext {
            vision,
            chat,
            embedding: Arc::new(HashedBagOfWords::default()),
            evidence,
            catalog: Arc::new(PromptCatalog::builtin().clone()),
            entity_client: None,
            config: PipelineConfig::default(),
        }
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_entity_client(mut self, client: Arc<dyn EntityClient>) -> Self {
        self.entity_client = Some(client);
        self
    }

    pub fn with_embedding(mut self, embedding: Arc<dyn EmbeddingBackend>) -> Self {
        self.embedding = embedding;
        self
    }
}

/// Per-claim call accounting.
#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    model_calls: usize,
    network_calls: usize,
    composed_by_model: bool,
}

impl Tally {
    fn call(&mut self, backend: &dyn CompletionBackend, request: &CompletionRequest) -> Result<String, PipelineError> {
        self.model_calls += 1;
        let response = complete(backend, request)?;
        if !response.cached {
            self.network_calls += 1;
        }
        Ok(response.text)
    }
}

fn ensure_readable(image: &ImageRef) -> Result<(), PipelineError> {
    image.read_bytes().map(|_| ()).map_err(|e| PipelineError::ImageUnavailable(e.to_string()))
}

/// Brief description of an image from the vision backend, prompted with a
/// seeded caption question.
pub fn describe(image: &ImageRef, vision: &dyn CompletionBackend, seed: u64) -> Result<String, PipelineError> {
    ensure_readable(image)?;
    let question = PromptCatalog::builtin().sample_caption_question(seed);
    let request = CompletionRequest::new(vision.model_id(), vec![Message::user_with_image(question, image.clone())]);
    Ok(complete(vision, &request)?.text.trim().to_string())
}

fn resolve_entities(claim: &Claim, ctx: &PipelineContext) -> Vec<String> {
    let stored = || {
        ctx.evidence
            .lookup(&claim.id)
            .map(|e| e.visual_entities.clone())
            .unwrap_or_default()
    };
    match ctx.config.entity_source {
        EntitySource::None => Vec::new(),
        EntitySource::Stored => stored(),
        EntitySource::Live => match &ctx.entity_client {
            Some(client) => detect_entities(&claim.image, client.as_ref()).unwrap_or_else(|e| {
                log::warn!("claim {}: entity detection failed ({e}); using stored entities", claim.id);
                stored()
            }),
            None => {
                log::warn!("claim {}: no entity client configured; using stored entities", claim.id);
                stored()
            }
        },
    }
}

/// Prompt the internal check would send for `claim`.
pub fn internal_prompt(claim: &Claim, ctx: &PipelineContext) -> Result<String, PipelineError> {
    let entities = resolve_entities(claim, ctx);
    Ok(ctx.catalog.render_internal_prompt(&claim.caption, &entities)?)
}

fn internal_inner(claim: &Claim, ctx: &PipelineContext, tally: &mut Tally) -> Result<CheckOutcome, PipelineError> {
    let prompt = internal_prompt(claim, ctx)?;
    ensure_readable(&claim.image)?;
    let request = CompletionRequest::new(ctx.vision.model_id(), vec![Message::user_with_image(prompt, claim.image.clone())]);
    let text = tally.call(ctx.vision.as_ref(), &request)?;
    Ok(parse_verdict(&text, Stage::Internal))
}

/// Image-text consistency judged by the vision backend.
pub fn internal_check(claim: &Claim, ctx: &PipelineContext) -> CheckOutcome {
    internal_inner(claim, ctx, &mut Tally::default()).unwrap_or_else(|e| CheckOutcome::failed(Stage::Internal, &e.to_string()))
}

fn external_inner(claim: &Claim, ctx: &PipelineContext, tally: &mut Tally) -> Option<Result<CheckOutcome, PipelineError>> {
    let Some(evidence) = ctx.evidence.lookup(&claim.id) else {
        log::debug!("claim {}: no evidence entry; skipping external check", claim.id);
        return None;
    };
    if evidence.pages.is_empty() {
        log::debug!("claim {}: evidence entry has no pages; skipping external check", claim.id);
        return None;
    }
    Some((|| {
        let prompt = ctx.catalog.render_external_prompt(&claim.caption, &evidence.pages, ctx.config.limits())?;
        let request = CompletionRequest::new(ctx.chat.model_id(), vec![Message::user(prompt)]);
        let text = tally.call(ctx.chat.as_ref(), &request)?;
        Ok(parse_verdict(&text, Stage::External))
    })())
}

/// Caption-versus-evidence judgment by the chat backend; `None` when the
/// claim has no evidence pages.
pub fn external_check(claim: &Claim, ctx: &PipelineContext) -> Option<CheckOutcome> {
    external_inner(claim, ctx, &mut Tally::default())
        .map(|r| r.unwrap_or_else(|e| CheckOutcome::failed(Stage::External, &e.to_string())))
}

fn copy_as_composed(internal: &CheckOutcome) -> CheckOutcome {
    CheckOutcome { stage: Stage::Composed, ..internal.clone() }
}

/// Composer output was unusable: keep its text, take the internal verdict.
fn fall_back_to_internal(internal: &CheckOutcome, raw: String) -> CheckOutcome {
    let mut explanation = internal.explanation.clone();
    explanation.rationale = raw.clone();
    CheckOutcome {
        stage: Stage::Composed,
        verdict: internal.verdict,
        explanation,
        raw_response: raw,
        parse_status: if internal.verdict.is_some() {
            ParseStatus::FallbackClassified
        } else {
            ParseStatus::NonCompliant
        },
    }
}

fn is_failed(outcome: &CheckOutcome) -> bool {
    outcome.parse_status == ParseStatus::NonCompliant && outcome.raw_response.starts_with("[error]")
}

fn compose_inner(
    claim: &Claim,
    internal: &CheckOutcome,
    external: Option<&CheckOutcome>,
    ctx: &PipelineContext,
    tally: &mut Tally,
) -> CheckOutcome {
    let external = match external {
        Some(ext) if ctx.config.compose_mode == ComposeMode::Model && !is_failed(ext) => ext,
        _ => return copy_as_composed(internal),
    };
    tally.composed_by_model = true;
    let attempt = (|| {
        let prompt = ctx.catalog.render_compose_prompt(&claim.caption, internal, external)?;
        let request = CompletionRequest::new(ctx.chat.model_id(), vec![Message::user(prompt)]);
        tally.call(ctx.chat.as_ref(), &request)
    })();
    match attempt {
        Ok(text) => {
            let composed = parse_verdict(&text, Stage::Composed);
            if composed.parse_status == ParseStatus::NonCompliant {
                fall_back_to_internal(internal, text)
            } else {
                composed
            }
        }
        Err(e) => {
            log::warn!("claim {}: compose call failed ({e}); using internal verdict", claim.id);
            fall_back_to_internal(internal, format!("[error] {e}"))
        }
    }
}

/// Final verdict from both stage outcomes.
pub fn compose(claim: &Claim, internal: &CheckOutcome, external: Option<&CheckOutcome>, ctx: &PipelineContext) -> CheckOutcome {
    compose_inner(claim, internal, external, ctx, &mut Tally::default())
}

fn detect_inner(claim: &Claim, ctx: &PipelineContext) -> (DetectionResult, Tally) {
    let mut tally = Tally::default();
    let mut failures = Vec::new();

    let internal = internal_inner(claim, ctx, &mut tally).unwrap_or_else(|e| {
        failures.push(format!("internal: {e}"));
        CheckOutcome::failed(Stage::Internal, &e.to_string())
    });
    let external = external_inner(claim, ctx, &mut tally).map(|r| {
        r.unwrap_or_else(|e| {
            failures.push(format!("external: {e}"));
            CheckOutcome::failed(Stage::External, &e.to_string())
        })
    });
    let composed = compose_inner(claim, &internal, external.as_ref(), ctx, &mut tally);
    let evidence_used = external.as_ref().is_some_and(|e| !is_failed(e));

    let result = DetectionResult {
        claim_id: claim.id.clone(),
        internal,
        external,
        composed,
        evidence_used,
        model_calls: tally.model_calls,
        backend_calls: tally.network_calls,
        failure: (!failures.is_empty()).then(|| failures.join("; ")),
    };
    (result, tally)
}

/// Run all three stages for one claim.
pub fn detect(claim: &Claim, ctx: &PipelineContext) -> DetectionResult {
    detect_inner(claim, ctx).0
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub internal_structured: usize,
    pub internal_fallback: usize,
    pub internal_noncompliant: usize,
    pub external_run: usize,
    pub external_skipped: usize,
    pub composed_by_model: usize,
    pub composed_from_internal: usize,
    pub composed_fake: usize,
    pub composed_real: usize,
    pub composed_absent: usize,
    pub failed_claims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub prompt_catalog_checksum: String,
    pub vision_backend_id: String,
    pub chat_backend_id: String,
    pub embedding_backend_id: String,
    pub config: PipelineConfig,
    pub n_claims: usize,
    pub stage_counts: StageCounts,
    pub model_calls: usize,
    pub network_calls: usize,
    pub cache_hits: usize,
    pub cache_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Detect every claim with bounded concurrency. Output order follows input
/// order; one claim's failure never stops the batch.
pub fn detect_batch(claims: &[Claim], ctx: &PipelineContext) -> Result<(Vec<DetectionResult>, RunManifest), PipelineError> {
    if claims.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    let outputs = ordered_map(claims, ctx.config.concurrency, |_, claim| detect_inner(claim, ctx));

    let mut counts = StageCounts::default();
    let (mut model_calls, mut network_calls) = (0, 0);
    for (r, tally) in &outputs {
        match r.internal.parse_status {
            ParseStatus::Structured => counts.internal_structured += 1,
            ParseStatus::FallbackClassified => counts.internal_fallback += 1,
            ParseStatus::NonCompliant => counts.internal_noncompliant += 1,
        }
        if r.external.is_some() {
            counts.external_run += 1;
        } else {
            counts.external_skipped += 1;
        }
        if tally.composed_by_model {
            counts.composed_by_model += 1;
        } else {
            counts.composed_from_internal += 1;
        }
        match r.composed.verdict {
            Some(Verdict::Fake) => counts.composed_fake += 1,
            Some(Verdict::Real) => counts.composed_real += 1,
            None => counts.composed_absent += 1,
        }
        if r.failure.is_some() {
            counts.failed_claims += 1;
        }
        model_calls += tally.model_calls;
        network_calls += tally.network_calls;
    }
    let cache_hits = model_calls - network_calls;
    let manifest = RunManifest {
        prompt_catalog_checksum: ctx.catalog.checksum().to_string(),
        vision_backend_id: ctx.vision.id().to_string(),
        chat_backend_id: ctx.chat.id().to_string(),
        embedding_backend_id: ctx.embedding.id().to_string(),
        config: ctx.config,
        n_claims: claims.len(),
        stage_counts: counts,
        model_calls,
        network_calls,
        cache_hits,
        cache_hit_rate: (model_calls > 0).then(|| cache_hits as f64 / model_calls as f64),
        seed: None,
    };
    Ok((outputs.into_iter().map(|(r, _)| r).collect(), manifest))
}

pub fn write_results_jsonl(path: &Path, results: &[DetectionResult]) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<DetectionResult>, PipelineError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut results = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| PipelineError::Results { line: i + 1, message: e.to_string() })?;
        results.push(r);
    }
    Ok(results)
}
