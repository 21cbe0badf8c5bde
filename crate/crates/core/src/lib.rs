//! Out-of-context image repurposing detection.
//!
//! A claim (news caption plus image) is judged in three stages: an internal
//! image-text consistency check on a vision backend, an external check of
//! the caption against webpages retrieved for the image, and a composing
//! step that merges both into one verdict with an explanation. The crate
//! also builds instruction-tuning data for such a detector and evaluates
//! detection runs.

pub mod backend;
pub mod domain;
pub mod evidence;
pub mod instructgen;
pub mod metrics;
pub mod parallel;
pub mod parser;
pub mod pipeline;
pub mod prompts;

#[cfg(test)]
mod testutil;

pub use domain::{
    canonicalize_element, CheckOutcome, Claim, DetectionResult, Explanation, GoldLabel, ImageRef, NewsElement,
    ParseStatus, Stage, Verdict,
};
