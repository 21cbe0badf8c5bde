//! Reading model answers back into verdicts and explanations.
//!
//! `parse_verdict` is total. It classifies a response into one of three
//! tiers:
//!
//! 1. **Structured**: the trimmed answer opens with the expected Yes/No
//!    sentence (case-insensitive). For a "No" answer the element and the two
//!    entities are pulled out of the canonical sentence when present.
//! 2. **FallbackClassified**: the answer mentions "rightly used" or "wrongly
//!    used" somewhere; the earliest mention decides.
//! 3. **NonCompliant**: neither phrase appears; no verdict.

use thiserror::Error;

use crate::domain::{canonicalize_element, CheckOutcome, Explanation, NewsElement, ParseStatus, Stage, Verdict};
use crate::prompts::format;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("invalid field {0}")]
    InvalidField(&'static str),
}

/// One inconsistency proposed by the instruction-data generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInconsistency {
    pub element: NewsElement,
    pub ent_t: String,
    pub ent_v: String,
    pub sentence: String,
}

const ELEMENT_STOPS: &[char] = &['.', ',', ';', ':', '!', '?', '"', ')', '\n', '\r'];

pub fn parse_verdict(raw: &str, stage: Stage) -> CheckOutcome {
    let text = raw.trim();
    // ASCII lowercasing keeps byte offsets aligned with `text`.
    let lower = text.to_ascii_lowercase();

    let (verdict, parse_status, fields) = if lower.starts_with(&format::REAL_PREFIX.to_ascii_lowercase()) {
        (Some(Verdict::Real), ParseStatus::Structured, Fields::default())
    } else if lower.starts_with(&format::FAKE_PREFIX.to_ascii_lowercase()) {
        (Some(Verdict::Fake), ParseStatus::Structured, extract_fields(text, &lower))
    } else {
        match keyword_verdict(&lower) {
            Some(v) => (Some(v), ParseStatus::FallbackClassified, Fields::default()),
            None => (None, ParseStatus::NonCompliant, Fields::default()),
        }
    };

    CheckOutcome {
        stage,
        verdict,
        explanation: Explanation {
            element: fields.element,
            ent_t: fields.ent_t,
            ent_v: fields.ent_v,
            rationale: raw.to_string(),
        },
        raw_response: raw.to_string(),
        parse_status,
    }
}

/// Earliest of the two verdict keywords, if any.
fn keyword_verdict(lower: &str) -> Option<Verdict> {
    let real = lower.find(format::REAL_KEYWORD);
    let fake = lower.find(format::FAKE_KEYWORD);
    match (real, fake) {
        (Some(r), Some(f)) => Some(if r < f { Verdict::Real } else { Verdict::Fake }),
        (Some(_), None) => Some(Verdict::Real),
        (None, Some(_)) => Some(Verdict::Fake),
        (None, None) => None,
    }
}

#[derive(Debug, Default)]
struct Fields {
    element: Option<NewsElement>,
    ent_t: Option<String>,
    ent_v: Option<String>,
}

fn extract_fields(text: &str, lower: &str) -> Fields {
    let Some(element_raw) = element_after_inconsistent_in(text, lower).or_else(|| element_before_in_caption(text, lower))
    else {
        return Fields::default();
    };
    let Ok(element) = canonicalize_element(&element_raw) else {
        return Fields::default();
    };
    let key = element_raw.trim().to_ascii_lowercase();
    let (ent_t, ent_v) = match extract_entities(text, lower, &key) {
        Some((t, v)) => (Some(t), Some(v)),
        None => (None, None),
    };
    Fields { element: Some(element), ent_t, ent_v }
}

/// "... inconsistent in <element>." The element runs to the next clause
/// punctuation.
fn element_after_inconsistent_in(text: &str, lower: &str) -> Option<String> {
    const MARKER: &str = "inconsistent in ";
    let start = lower.find(MARKER)? + MARKER.len();
    let rest = text[start..].trim_start_matches(['"', '\'', '“']);
    let end = rest.find(ELEMENT_STOPS).unwrap_or(rest.len());
    non_empty(strip_quotes(rest[..end].trim()))
}

/// "... the <element> in the caption ..." with a short element phrase.
fn element_before_in_caption(text: &str, lower: &str) -> Option<String> {
    const MARKER: &str = " in the caption";
    let at = lower.find(MARKER)?;
    let head = &lower[..at];
    let the = head.rfind("the ")?;
    if the > 0 && !head[..the].ends_with(|c: char| c.is_whitespace() || ELEMENT_STOPS.contains(&c)) {
        return None;
    }
    let phrase = text[the + 4..at].trim();
    let words = phrase.split_whitespace().count();
    if words == 0 || words > 3 || phrase.contains(ELEMENT_STOPS) {
        return None;
    }
    Some(phrase.to_string())
}

/// "The <e> in the caption is <ent_t>, and the <e> in the image is <ent_v>."
fn extract_entities(text: &str, lower: &str, element: &str) -> Option<(String, String)> {
    let caption_marker = format!("the {element}{}", format::IN_CAPTION_IS);
    let image_marker = format!("{}{element}{}", format::AND_THE, format::IN_IMAGE_IS);

    let t_start = lower.find(&caption_marker)? + caption_marker.len();
    let t_len = lower[t_start..].find(&image_marker)?;
    let v_start = t_start + t_len + image_marker.len();

    let ent_t = clean_entity(&text[t_start..t_start + t_len])?;
    let ent_v = clean_entity(sentence_tail(&text[v_start..]))?;
    Some((ent_t, ent_v))
}

/// Text up to the end of the current sentence: a period followed by
/// whitespace or a closing quote, a line break, or end of input (dropping one
/// final period).
fn sentence_tail(rest: &str) -> &str {
    let bytes = rest.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'\n' | b'\r' => return &rest[..i],
            b'.' => match bytes.get(i + 1) {
                Some(b' ') | Some(b'\t') | Some(b'\n') | Some(b'\r') | Some(b'"') => return &rest[..i],
                _ => {}
            },
            _ => {}
        }
    }
    rest.strip_suffix('.').unwrap_or(rest)
}

/// Entities are kept verbatim, quotes included, so that any rendered
/// target parses back to the same strings.
fn clean_entity(s: &str) -> Option<String> {
    non_empty(s)
}

/// Remove one pair of matching surrounding quotes.
fn strip_quotes(s: &str) -> &str {
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')] {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return &s[open.len_utf8()..s.len() - close.len_utf8()];
        }
    }
    s
}

fn non_empty(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Extract the labeled `Element:` / `Entity_caption:` / `Entity_image:`
/// lines from a generator answer. Literal `\n` escapes are treated as line
/// breaks, since the generation prompt shows them that way.
pub fn parse_generated_inconsistency(raw: &str) -> Result<GeneratedInconsistency, ParseError> {
    let text = raw.replace("\\n", "\n");
    let mut element = None;
    let mut ent_t = None;
    let mut ent_v = None;
    let mut first_label_line = None;

    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        let slot = if let Some(v) = line.strip_prefix("Element:") {
            Some((&mut element, v))
        } else if let Some(v) = line.strip_prefix("Entity_caption:") {
            Some((&mut ent_t, v))
        } else if let Some(v) = line.strip_prefix("Entity_image:") {
            Some((&mut ent_v, v))
        } else {
            None
        };
        if let Some((target, value)) = slot {
            first_label_line.get_or_insert(i);
            if target.is_none() {
                *target = clean_entity(value);
            }
        }
    }

    let element_raw = element.ok_or(ParseError::MissingField("element"))?;
    let element = canonicalize_element(&element_raw).map_err(|_| ParseError::MissingField("element"))?;
    let ent_t = ent_t.ok_or(ParseError::MissingField("ent_t"))?;
    let ent_v = ent_v.ok_or(ParseError::MissingField("ent_v"))?;

    let sentence = text
        .lines()
        .take(first_label_line.unwrap_or(0))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let sentence = sentence.strip_prefix("The answer is:").map(str::trim).unwrap_or(&sentence).to_string();

    Ok(GeneratedInconsistency { element, ent_t, ent_v, sentence })
}

/// The canonical "No" answer naming the inconsistent element and entities.
pub fn render_fake_target(element: &NewsElement, ent_t: &str, ent_v: &str) -> Result<String, ParseError> {
    let element = element.as_str();
    if element.trim().is_empty() {
        return Err(ParseError::InvalidField("element"));
    }
    let bad = |e: &str| e.trim().is_empty() || e.trim() != e || e.contains(['\n', '\r']);
    if bad(ent_t) {
        return Err(ParseError::InvalidField("ent_t"));
    }
    if bad(ent_v) {
        return Err(ParseError::InvalidField("ent_v"));
    }
    Ok(format!(
        "{} {}{element}. The {element}{}{ent_t}{}{element}{}{ent_v}.",
        format::FAKE_ANSWER,
        format::INCONSISTENT_IN,
        format::IN_CAPTION_IS,
        format::AND_THE,
        format::IN_IMAGE_IS,
    ))
}
