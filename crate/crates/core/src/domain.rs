//! Value types shared across the detector: claims, verdicts, news elements,
//! per-stage outcomes and the final detection result.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("news element must be non-empty")]
    InvalidElement,
    #[error("claim caption must be non-empty")]
    EmptyCaption,
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
}

/// Reference to an image, either a local file or a remote URL.
///
/// Serialized as a plain string; strings starting with `http://` or
/// `https://` are URLs, everything else is a filesystem path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageRef {
    Path(PathBuf),
    Url(String),
}

impl ImageRef {
    pub fn parse(raw: &str) -> Self {
        if raw.starts_with("http://") || raw.starts_with("https://") {
            ImageRef::Url(raw.to_string())
        } else {
            ImageRef::Path(PathBuf::from(raw))
        }
    }

    /// Raw bytes of a local image. URLs have no local bytes.
    pub fn read_bytes(&self) -> Result<Option<Vec<u8>>, DomainError> {
        match self {
            ImageRef::Path(p) => std::fs::read(p)
                .map(Some)
                .map_err(|e| DomainError::ImageUnavailable(format!("{}: {e}", p.display()))),
            ImageRef::Url(_) => Ok(None),
        }
    }

    /// Hex SHA-256 of the image content (local files) or of the URL string.
    pub fn content_digest(&self) -> Result<String, DomainError> {
        let mut hasher = Sha256::new();
        match self.read_bytes()? {
            Some(bytes) => {
                hasher.update(b"file:");
                hasher.update(&bytes);
            }
            None => {
                hasher.update(b"url:");
                hasher.update(self.to_string().as_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "{}", p.display()),
            ImageRef::Url(u) => f.write_str(u),
        }
    }
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(ImageRef::parse(&raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldLabel {
    #[serde(alias = "pristine")]
    Real,
    #[serde(alias = "falsified")]
    Fake,
}

impl GoldLabel {
    pub fn as_verdict(self) -> Verdict {
        match self {
            GoldLabel::Real => Verdict::Real,
            GoldLabel::Fake => Verdict::Fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One news item: a caption paired with an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub caption: String,
    pub image: ImageRef,
    #[serde(rename = "label", default)]
    pub gold_label: Option<GoldLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Claim {
    pub fn new(id: impl Into<String>, caption: impl Into<String>, image: ImageRef) -> Result<Self, DomainError> {
        let claim = Claim {
            id: id.into(),
            caption: caption.into(),
            image,
            gold_label: None,
            split: None,
        };
        claim.validate()?;
        Ok(claim)
    }

    pub fn with_label(mut self, label: GoldLabel) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.caption.trim().is_empty() {
            return Err(DomainError::EmptyCaption);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Real,
    Fake,
}

/// The news dimension in which caption and image disagree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NewsElement {
    Time,
    Place,
    Person,
    Event,
    Artwork,
    Object,
    Other(String),
}

impl NewsElement {
    pub const CLOSED_SET: [NewsElement; 6] = [
        NewsElement::Time,
        NewsElement::Place,
        NewsElement::Person,
        NewsElement::Event,
        NewsElement::Artwork,
        NewsElement::Object,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            NewsElement::Time => "time",
            NewsElement::Place => "place",
            NewsElement::Person => "person",
            NewsElement::Event => "event",
            NewsElement::Artwork => "artwork",
            NewsElement::Object => "object",
            NewsElement::Other(raw) => raw,
        }
    }
}

/// Normalize a free-text element name: trim, lowercase, and map onto the
/// closed set where possible.
pub fn canonicalize_element(raw: &str) -> Result<NewsElement, DomainError> {
    let token = raw.trim().to_lowercase();
    if token.is_empty() {
        return Err(DomainError::InvalidElement);
    }
    Ok(match token.as_str() {
        "time" => NewsElement::Time,
        "place" => NewsElement::Place,
        "person" => NewsElement::Person,
        "event" => NewsElement::Event,
        "artwork" => NewsElement::Artwork,
        "object" => NewsElement::Object,
        _ => NewsElement::Other(token),
    })
}

impl fmt::Display for NewsElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NewsElement {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        canonicalize_element(s)
    }
}

impl Serialize for NewsElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for NewsElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        canonicalize_element(&raw).map_err(serde::de::Error::custom)
    }
}

/// Structured explanation attached to a verdict. All fields but the
/// rationale are optional; a real-news answer carries none of them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub element: Option<NewsElement>,
    pub ent_t: Option<String>,
    pub ent_v: Option<String>,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Internal,
    External,
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    Structured,
    FallbackClassified,
    NonCompliant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub stage: Stage,
    pub verdict: Option<Verdict>,
    pub explanation: Explanation,
    pub raw_response: String,
    pub parse_status: ParseStatus,
}

impl CheckOutcome {
    /// Outcome for a stage whose backend call failed outright.
    pub fn failed(stage: Stage, error: &str) -> Self {
        let raw = format!("[error] {error}");
        CheckOutcome {
            stage,
            verdict: None,
            explanation: Explanation {
                rationale: raw.clone(),
                ..Default::default()
            },
            raw_response: raw,
            parse_status: ParseStatus::NonCompliant,
        }
    }

    pub fn is_consistent(&self) -> bool {
        match self.parse_status {
            ParseStatus::Structured => self.verdict.is_some(),
            ParseStatus::NonCompliant => self.verdict.is_none(),
            ParseStatus::FallbackClassified => true,
        }
    }
}

/// Final output of the three-stage reasoning process for one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub claim_id: String,
    pub internal: CheckOutcome,
    pub external: Option<CheckOutcome>,
    pub composed: CheckOutcome,
    pub evidence_used: bool,
    /// Model calls issued for this claim, whether or not served from cache.
    pub model_calls: usize,
    /// Calls that reached the backend (cache misses). Kept out of the
    /// results file so cached reruns serialize identically.
    #[serde(skip)]
    pub backend_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl DetectionResult {
    pub fn verdict(&self) -> Option<Verdict> {
        self.composed.verdict
    }
}
