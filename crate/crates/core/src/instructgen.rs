//! Instruction-tuning data.
//!
//! Stage 1 pairs each news image with a randomly chosen brief-description
//! question and uses the caption as the answer. Stage 2 asks a text-only
//! generator to name the inconsistency in each falsified pair. The result
//! becomes a "No" target, and an equal number of pristine pairs get the
//! fixed "Yes" target.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete, CompletionBackend, CompletionRequest, Message};
use crate::domain::{canonicalize_element, Claim, GoldLabel, ImageRef};
use crate::evidence::{parse_jsonl_records, read_file, IngestError};
use crate::parallel::ordered_map;
use crate::parser::{parse_generated_inconsistency, render_fake_target, ParseError};
use crate::prompts::{format, PromptCatalog, PromptError};

#[derive(Debug, Error)]
pub enum InstructGenError {
    #[error("no input pairs")]
    EmptyDataset,
    #[error("pair {0}: caption is empty")]
    EmptyCaption(String),
    #[error("need {needed} real pairs to balance the fake records, have {available}")]
    InsufficientReals { needed: usize, available: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A pristine (image, caption) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub id: String,
    pub image: ImageRef,
    pub caption: String,
}

/// A falsified pair: `cap_new` shown with the image that originally
/// illustrated `cap_ori`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakePairSource {
    pub id: String,
    pub cap_new: String,
    pub cap_ori: String,
    pub image: ImageRef,
    pub basic_description: String,
}

impl FakePairSource {
    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [("cap_new", &self.cap_new), ("cap_ori", &self.cap_ori), ("basic_description", &self.basic_description)] {
            if value.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        if self.cap_new.trim() == self.cap_ori.trim() {
            return Err("cap_new equals cap_ori".into());
        }
        Ok(())
    }
}

/// Falsified pairs from a JSON Lines file, one `FakePairSource` per line.
pub fn load_fake_pairs(path: &Path) -> Result<Vec<FakePairSource>, IngestError> {
    let mut seen = HashSet::new();
    parse_jsonl_records(&read_file(path)?, |f: &FakePairSource| {
        f.validate()?;
        if !seen.insert(f.id.clone()) {
            return Err(format!("duplicate id {}", f.id));
        }
        Ok(())
    })
}

/// Pristine pairs from the claims with a `real` label.
pub fn real_pairs(claims: &[Claim]) -> Vec<CaptionPair> {
    claims
        .iter()
        .filter(|c| c.gold_label == Some(GoldLabel::Real))
        .map(CaptionPair::from)
        .collect()
}

impl From<&Claim> for CaptionPair {
    fn from(c: &Claim) -> Self {
        CaptionPair { id: c.id.clone(), image: c.image.clone(), caption: c.caption.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstructionKind {
    #[serde(rename = "caption_align")]
    CaptionAlign,
    #[serde(rename = "ooc_fake")]
    OocFake,
    #[serde(rename = "ooc_real")]
    OocReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image: ImageRef,
    pub prompt: String,
    pub target: String,
    pub kind: InstructionKind,
    pub provenance: BTreeMap<String, String>,
}

pub const STOP: &str = "<STOP>";

impl InstructionRecord {
    /// Two-turn training text: the human turn carries the image and the
    /// prompt, the model turn the target, each closed by `<STOP>`.
    pub fn conversation(&self) -> String {
        format!("Human: <image> {} {STOP}\nModel: {} {STOP}", self.prompt, self.target)
    }

    fn source_id(&self) -> Option<&str> {
        self.provenance.get("source_id").map(String::as_str)
    }
}

/// Seed for the `index`-th record (splitmix64 over seed and index).
fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn build_stage1(pairs: &[CaptionPair], seed: u64) -> Result<Vec<InstructionRecord>, InstructGenError> {
    build_stage1_with(PromptCatalog::builtin(), pairs, seed)
}

pub fn build_stage1_with(catalog: &PromptCatalog, pairs: &[CaptionPair], seed: u64) -> Result<Vec<InstructionRecord>, InstructGenError> {
    if pairs.is_empty() {
        return Err(InstructGenError::EmptyDataset);
    }
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            if pair.caption.trim().is_empty() {
                return Err(InstructGenError::EmptyCaption(pair.id.clone()));
            }
            Ok(InstructionRecord {
                image: pair.image.clone(),
                prompt: catalog.sample_caption_question(derive_seed(seed, i)).to_string(),
                target: pair.caption.trim().to_string(),
                kind: InstructionKind::CaptionAlign,
                provenance: BTreeMap::from([("source_id".to_string(), pair.id.clone())]),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum SkipReason {
    MissingField(String),
    InvalidField(String),
    Backend(String),
    InvalidSource(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub source_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub attempted: usize,
    pub generated: usize,
    pub skipped: Vec<SkipEntry>,
}

impl GenerationLog {
    pub fn missing_field_skips(&self) -> usize {
        self.skipped.iter().filter(|s| matches!(s.reason, SkipReason::MissingField(_))).count()
    }
}

/// Stage-2 generation knobs.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Options {
    pub seed: u64,
    pub concurrency: usize,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options { seed: 0, concurrency: 1 }
    }
}

fn generate_fake(
    catalog: &PromptCatalog,
    fake: &FakePairSource,
    chat: &dyn CompletionBackend,
) -> Result<InstructionRecord, SkipReason> {
    fake.validate().map_err(SkipReason::InvalidSource)?;
    let (system, query) = catalog
        .render_ooc_gen_messages(&fake.cap_ori, &fake.cap_new, &fake.basic_description)
        .map_err(|e| SkipReason::InvalidSource(e.to_string()))?;
    let request = CompletionRequest::new(chat.model_id(), vec![Message::system(system), Message::user(query)]);
    let response = complete(chat, &request).map_err(|e| SkipReason::Backend(e.to_string()))?;
    let found = parse_generated_inconsistency(&response.text).map_err(|e| match e {
        ParseError::MissingField(f) => SkipReason::MissingField(f.to_string()),
        ParseError::InvalidField(f) => SkipReason::InvalidField(f.to_string()),
    })?;
    let target = render_fake_target(&found.element, &found.ent_t, &found.ent_v)
        .map_err(|e| SkipReason::InvalidField(e.to_string()))?;
    let prompt = catalog
        .render_internal_prompt(&fake.cap_new, &[])
        .map_err(|e| SkipReason::InvalidSource(e.to_string()))?;
    Ok(InstructionRecord {
        image: fake.image.clone(),
        prompt,
        target,
        kind: InstructionKind::OocFake,
        provenance: BTreeMap::from([
            ("generator_model_id".to_string(), chat.model_id().to_string()),
            ("source_id".to_string(), fake.id.clone()),
            ("element".to_string(), found.element.to_string()),
            ("ent_t".to_string(), found.ent_t),
            ("ent_v".to_string(), found.ent_v),
        ]),
    })
}

pub fn build_stage2(
    fakes: &[FakePairSource],
    reals: &[CaptionPair],
    chat: &dyn CompletionBackend,
    options: Stage2Options,
) -> Result<(Vec<InstructionRecord>, GenerationLog), InstructGenError> {
    build_stage2_with(PromptCatalog::builtin(), fakes, reals, chat, options)
}

/// All generated fake records (input order) followed by as many real
/// records, sampled from `reals` without replacement.
pub fn build_stage2_with(
    catalog: &PromptCatalog,
    fakes: &[FakePairSource],
    reals: &[CaptionPair],
    chat: &dyn CompletionBackend,
    options: Stage2Options,
) -> Result<(Vec<InstructionRecord>, GenerationLog), InstructGenError> {
    let outcomes = ordered_map(fakes, options.concurrency, |_, fake| generate_fake(catalog, fake, chat));

    let mut log = GenerationLog { attempted: fakes.len(), ..Default::default() };
    let mut records = Vec::new();
    for (fake, outcome) in fakes.iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(reason) => {
                log::warn!("fake pair {}: skipped ({reason:?})", fake.id);
                log.skipped.push(SkipEntry { source_id: fake.id.clone(), reason });
            }
        }
    }
    log.generated = records.len();

    let needed = records.len();
    if reals.len() < needed {
        return Err(InstructGenError::InsufficientReals { needed, available: reals.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for idx in rand::seq::index::sample(&mut rng, reals.len(), needed).into_iter() {
        let pair = &reals[idx];
        if pair.caption.trim().is_empty() {
            return Err(InstructGenError::EmptyCaption(pair.id.clone()));
        }
        records.push(InstructionRecord {
            image: pair.image.clone(),
            prompt: catalog.render_internal_prompt(&pair.caption, &[])?,
            target: format::REAL_TARGET.to_string(),
            kind: InstructionKind::OocReal,
            provenance: BTreeMap::from([("source_id".to_string(), pair.id.clone())]),
        });
    }
    Ok((records, log))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub source_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub total: usize,
    pub caption_align_count: usize,
    pub fake_count: usize,
    pub real_count: usize,
    pub violations: Vec<Violation>,
    /// (first index, duplicate index) for repeated (image, target) pairs.
    pub duplicates: Vec<(usize, usize)>,
}

fn check_record(r: &InstructionRecord) -> Vec<String> {
    let mut problems = Vec::new();
    if r.prompt.trim().is_empty() {
        problems.push("empty prompt".to_string());
    }
    if r.target.trim().is_empty() {
        problems.push("empty target".to_string());
    }
    match r.kind {
        InstructionKind::OocFake => {
            let field = |k: &str| r.provenance.get(k).filter(|v| !v.trim().is_empty());
            match (field("element"), field("ent_t"), field("ent_v")) {
                (Some(e), Some(t), Some(v)) => {
                    let expected = canonicalize_element(e).ok().and_then(|e| render_fake_target(&e, t, v).ok());
                    if expected.as_deref() != Some(r.target.as_str()) {
                        problems.push("target does not match provenance element/ent_t/ent_v".to_string());
                    }
                }
                _ => problems.push("provenance lacks element, ent_t or ent_v".to_string()),
            }
        }
        InstructionKind::OocReal => {
            if r.target != format::REAL_TARGET {
                problems.push("real record target is not the fixed real-sample sentence".to_string());
            }
        }
        InstructionKind::CaptionAlign => {}
    }
    problems
}

/// Check every record invariant without touching the input.
pub fn validate_records(records: &[InstructionRecord]) -> ValidationReport {
    let mut report = ValidationReport { total: records.len(), ..Default::default() };
    let mut seen: HashMap<(String, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        match r.kind {
            InstructionKind::CaptionAlign => report.caption_align_count += 1,
            InstructionKind::OocFake => report.fake_count += 1,
            InstructionKind::OocReal => report.real_count += 1,
        }
        for message in check_record(r) {
            report.violations.push(Violation { index: i, source_id: r.source_id().map(String::from), message });
        }
        if let Some(first) = seen.insert((r.image.to_string(), r.target.as_str()), i) {
            report.duplicates.push((first, i));
        }
    }
    if report.fake_count != report.real_count {
        report.violations.push(Violation {
            index: records.len(),
            source_id: None,
            message: format!("unbalanced: {} fake vs {} real records", report.fake_count, report.real_count),
        });
    }
    report.ok = report.violations.is_empty() && report.duplicates.is_empty();
    report
}

#[derive(Serialize)]
struct RecordLine<'a> {
    image: &'a ImageRef,
    prompt: &'a str,
    target: &'a str,
    kind: InstructionKind,
    provenance: &'a BTreeMap<String, String>,
    conversation: String,
}

pub fn write_records_jsonl(path: &Path, records: &[InstructionRecord]) -> Result<(), InstructGenError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            image: &r.image,
            prompt: &r.prompt,
            target: &r.target,
            kind: r.kind,
            provenance: &r.provenance,
            conversation: r.conversation(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCounts {
    pub caption_align: usize,
    pub ooc_fake: usize,
    pub ooc_real: usize,
}

impl RecordCounts {
    pub fn of(records: &[InstructionRecord]) -> Self {
        let mut c = RecordCounts::default();
        for r in records {
            match r.kind {
                InstructionKind::CaptionAlign => c.caption_align += 1,
                InstructionKind::OocFake => c.ooc_fake += 1,
                InstructionKind::OocReal => c.ooc_real += 1,
            }
        }
        c
    }
}

/// Sidecar describing how an instruction file was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionManifest {
    pub stage: u8,
    pub seed: u64,
    pub prompt_catalog_checksum: String,
    pub generator_model_id: Option<String>,
    pub counts: RecordCounts,
    pub skipped: Vec<SkipEntry>,
}
