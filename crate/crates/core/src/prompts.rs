//! Prompt catalog and renderers.
//!
//! The template texts live in `resources/prompts.txt`, embedded at build
//! time. Their SHA-256 is recorded in every run manifest. The answer-format
//! clause is defined in [`format`] and shared with the response parser.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::CheckOutcome;
use crate::evidence::EvidencePage;

/// Strings a compliant model answer is built from. The parser recognizes
/// exactly these.
pub mod format {
    macro_rules! real_prefix {
        () => {
            "Yes, the image is rightly used"
        };
    }
    macro_rules! fake_prefix {
        () => {
            "No, the image is wrongly used"
        };
    }
    macro_rules! real_answer {
        () => {
            concat!(real_prefix!(), ".")
        };
    }
    macro_rules! fake_answer {
        () => {
            concat!(fake_prefix!(), " in a different news context.")
        };
    }

    pub const REAL_PREFIX: &str = real_prefix!();
    pub const FAKE_PREFIX: &str = fake_prefix!();
    pub const REAL_ANSWER: &str = real_answer!();
    pub const FAKE_ANSWER: &str = fake_answer!();
    pub const REAL_KEYWORD: &str = "rightly used";
    pub const FAKE_KEYWORD: &str = "wrongly used";

    /// Target sentence for pristine samples in OOC instruction data.
    pub const REAL_TARGET: &str = "Yes, the image is rightly used in the given news context.";

    pub const INCONSISTENT_IN: &str = "The given news caption and image are inconsistent in ";
    pub const IN_CAPTION_IS: &str = " in the caption is ";
    pub const AND_THE: &str = ", and the ";
    pub const IN_IMAGE_IS: &str = " in the image is ";

    pub const ANSWER_FORMAT_CLAUSE: &str = concat!(
        "You should answer in the following forms: \"",
        real_answer!(),
        "\" or \"",
        fake_answer!(),
        " The given news caption and image are inconsistent in <element>. ",
        "The <element> in the caption is <ent_t>, and the <element> in the image is <ent_v>.\""
    );
}

const BUILTIN_CATALOG: &str = include_str!("../resources/prompts.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: slot {slot} is not bound")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unknown slot {slot}")]
    UnknownSlot { template: String, slot: String },
    #[error("no template named {0}")]
    UnknownTemplate(String),
    #[error("malformed catalog: {0}")]
    Catalog(String),
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("external check requires at least one evidence page")]
    EmptyEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(name: &str, body: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut required_slots = BTreeSet::new();
        let mut rest = body;
        while let Some(open) = rest.find("{{") {
            let close = rest[open..]
                .find("}}")
                .map(|c| open + c)
                .ok_or_else(|| PromptError::Catalog(format!("{name}: unterminated slot")))?;
            let slot = &rest[open + 2..close];
            if slot.is_empty() || !slot.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                return Err(PromptError::Catalog(format!("{name}: bad slot name {slot:?}")));
            }
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            segments.push(Segment::Slot(slot.to_string()));
            required_slots.insert(slot.to_string());
            rest = &rest[close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            required_slots,
            segments,
        })
    }

    /// Fill every slot in one pass. Bound values are inserted verbatim and
    /// never re-scanned for slots.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let bound: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        if let Some(extra) = bound.keys().find(|k| !self.required_slots.contains(**k)) {
            return Err(PromptError::UnknownSlot { template: self.name.clone(), slot: extra.to_string() });
        }
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(s) => out.push_str(bound.get(s.as_str()).ok_or_else(|| PromptError::MissingSlot {
                    template: self.name.clone(),
                    slot: s.clone(),
                })?),
            }
        }
        Ok(out)
    }
}

/// Evidence truncation applied when building the external-check prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvidenceLimits {
    pub max_pages: usize,
    pub max_chars_per_page: usize,
}

impl Default for EvidenceLimits {
    fn default() -> Self {
        EvidenceLimits { max_pages: 3, max_chars_per_page: 2000 }
    }
}

const REQUIRED: &[(&str, &[&str])] = &[
    ("internal", &["answer_format", "caption", "entity_block"]),
    ("external", &["answer_format", "caption", "evidence"]),
    ("compose", &["answer_format", "caption", "internal", "external"]),
    ("ooc_system", &[]),
    ("ooc_query", &["cap_ori", "cap_new", "basic_description"]),
    ("caption_questions", &[]),
];

#[derive(Debug, Clone)]
pub struct PromptCatalog {
    templates: BTreeMap<String, PromptTemplate>,
    questions: Vec<String>,
    checksum: String,
}

impl PromptCatalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> &'static PromptCatalog {
        static CATALOG: OnceLock<PromptCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| PromptCatalog::parse(BUILTIN_CATALOG).expect("built-in prompt catalog is valid"))
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut blocks: Vec<(String, Vec<&str>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("@@ ") {
                blocks.push((name.trim().to_string(), Vec::new()));
            } else if let Some((_, body)) = blocks.last_mut() {
                body.push(line);
            } else if !(line.trim().is_empty() || line.starts_with('#')) {
                return Err(PromptError::Catalog(format!("line {}: text outside any block", lineno + 1)));
            }
        }
        let mut templates = BTreeMap::new();
        for (name, mut lines) in blocks {
            while lines.last().is_some_and(|l| l.trim().is_empty()) {
                lines.pop();
            }
            let template = PromptTemplate::parse(&name, &lines.join("\n"))?;
            if templates.insert(name.clone(), template).is_some() {
                return Err(PromptError::Catalog(format!("duplicate block {name}")));
            }
        }
        for (name, slots) in REQUIRED {
            let t = templates.get(*name).ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
            let expected: BTreeSet<String> = slots.iter().map(|s| s.to_string()).collect();
            if t.required_slots != expected {
                return Err(PromptError::Catalog(format!(
                    "{name}: slots {:?}, expected {:?}",
                    t.required_slots, expected
                )));
            }
        }
        let questions: Vec<String> = templates["caption_questions"]
            .body
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(PromptCatalog {
            templates,
            questions,
            checksum: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    /// Hex SHA-256 of the catalog bytes.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn template(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(name).ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn caption_questions(&self) -> &[String] {
        &self.questions
    }

    pub fn render_internal_prompt(&self, caption: &str, visual_entities: &[String]) -> Result<String, PromptError> {
        if caption.trim().is_empty() {
            return Err(PromptError::EmptyInput("caption"));
        }
        let entity_block = if visual_entities.is_empty() {
            String::new()
        } else {
            format!("Detected visual entities in the image: {}\n", visual_entities.join(", "))
        };
        self.template("internal")?.render(&[
            ("answer_format", format::ANSWER_FORMAT_CLAUSE),
            ("caption", caption),
            ("entity_block", &entity_block),
        ])
    }

    pub fn render_external_prompt(
        &self,
        caption: &str,
        pages: &[EvidencePage],
        limits: EvidenceLimits,
    ) -> Result<String, PromptError> {
        if pages.is_empty() {
            return Err(PromptError::EmptyEvidence);
        }
        if caption.trim().is_empty() {
            return Err(PromptError::EmptyInput("caption"));
        }
        let evidence = pages
            .iter()
            .take(limits.max_pages.max(1))
            .enumerate()
            .map(|(i, p)| {
                format!(
                    "Evidence {} (from {}): {}",
                    i + 1,
                    p.url,
                    truncate_at_whitespace(&p.body, limits.max_chars_per_page)
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        self.template("external")?.render(&[
            ("answer_format", format::ANSWER_FORMAT_CLAUSE),
            ("caption", caption),
            ("evidence", &evidence),
        ])
    }

    pub fn render_compose_prompt(
        &self,
        caption: &str,
        internal: &CheckOutcome,
        external: &CheckOutcome,
    ) -> Result<String, PromptError> {
        self.template("compose")?.render(&[
            ("answer_format", format::ANSWER_FORMAT_CLAUSE),
            ("caption", caption),
            ("internal", &internal.raw_response),
            ("external", &external.raw_response),
        ])
    }

    /// System message and user message of the OOC generation prompt.
    pub fn render_ooc_gen_messages(
        &self,
        cap_ori: &str,
        cap_new: &str,
        basic_description: &str,
    ) -> Result<(String, String), PromptError> {
        for (name, value) in [("cap_ori", cap_ori), ("cap_new", cap_new), ("basic_description", basic_description)] {
            if value.trim().is_empty() {
                return Err(PromptError::EmptyInput(name));
            }
        }
        let system = self.template("ooc_system")?.render(&[])?;
        let query = self.template("ooc_query")?.render(&[
            ("cap_ori", cap_ori),
            ("cap_new", cap_new),
            ("basic_description", basic_description),
        ])?;
        Ok((system, query))
    }

    pub fn render_ooc_gen_prompt(&self, cap_ori: &str, cap_new: &str, basic_description: &str) -> Result<String, PromptError> {
        let (system, query) = self.render_ooc_gen_messages(cap_ori, cap_new, basic_description)?;
        Ok(format!("{system}\n\n{query}"))
    }

    pub fn sample_caption_question(&self, seed: u64) -> &str {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        &self.questions[rng.gen_range(0..self.questions.len())]
    }
}

/// Keep at most `max_chars` characters, cutting back to the last whitespace
/// inside the limit when the text is longer.
pub fn truncate_at_whitespace(text: &str, max_chars: usize) -> &str {
    let end = match text.char_indices().nth(max_chars) {
        None => return text,
        Some((byte, _)) => byte,
    };
    let head = &text[..end];
    // A cut that lands exactly on a word boundary keeps the whole head.
    if text[end..].starts_with(char::is_whitespace) {
        return head.trim_end();
    }
    match head.rfind(char::is_whitespace) {
        Some(ws) => head[..ws].trim_end(),
        None => head,
    }
}

pub fn render_internal_prompt(caption: &str, visual_entities: &[String]) -> Result<String, PromptError> {
    PromptCatalog::builtin().render_internal_prompt(caption, visual_entities)
}

pub fn render_external_prompt(caption: &str, pages: &[EvidencePage], limits: EvidenceLimits) -> Result<String, PromptError> {
    PromptCatalog::builtin().render_external_prompt(caption, pages, limits)
}

pub fn render_compose_prompt(caption: &str, internal: &CheckOutcome, external: &CheckOutcome) -> Result<String, PromptError> {
    PromptCatalog::builtin().render_compose_prompt(caption, internal, external)
}

pub fn render_ooc_gen_prompt(cap_ori: &str, cap_new: &str, basic_description: &str) -> Result<String, PromptError> {
    PromptCatalog::builtin().render_ooc_gen_prompt(cap_ori, cap_new, basic_description)
}

pub fn sample_caption_question(seed: u64) -> &'static str {
    PromptCatalog::builtin().sample_caption_question(seed)
}
