//! Evaluation: classification accuracy, explanation response and hit
//! ratios, entity similarity and ROUGE, plus report and CSV emission.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cosine, BackendError, EmbeddingBackend};
use crate::domain::{Claim, DetectionResult, GoldLabel, NewsElement, Verdict};
use crate::evidence::{parse_jsonl_records, read_file, IngestError};
use crate::parser::render_fake_target;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no gold label for claim {0}")]
    MissingLabel(String),
    #[error("text has no tokens")]
    ZeroLength,
    #[error("subset fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Reference explanation for a falsified claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExplanation {
    pub claim_id: String,
    pub element: NewsElement,
    pub ent_t: String,
    pub ent_v: String,
}

impl GoldExplanation {
    pub fn reference_text(&self) -> String {
        render_fake_target(&self.element, &self.ent_t, &self.ent_v).unwrap_or_default()
    }

    fn check(&self) -> Result<(), String> {
        if self.claim_id.trim().is_empty() {
            return Err("claim_id must be non-empty".into());
        }
        render_fake_target(&self.element, &self.ent_t, &self.ent_v).map_err(|e| e.to_string())?;
        Ok(())
    }
}

pub fn parse_gold_explanations(text: &str) -> Result<Vec<GoldExplanation>, IngestError> {
    let mut seen = HashSet::new();
    parse_jsonl_records(text, |g: &GoldExplanation| {
        g.check()?;
        if !seen.insert(g.claim_id.clone()) {
            return Err(format!("duplicate claim_id {}", g.claim_id));
        }
        Ok(())
    })
}

pub fn load_gold_explanations(path: &Path) -> Result<Vec<GoldExplanation>, IngestError> {
    parse_gold_explanations(&read_file(path)?)
}

pub fn labels_from_claims(claims: &[Claim]) -> HashMap<String, GoldLabel> {
    claims.iter().filter_map(|c| c.gold_label.map(|l| (c.id.clone(), l))).collect()
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Correct-answer counts per gold class. Ratios are derived from the
/// counts so the overall/class identity holds exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n_fake: usize,
    pub n_real: usize,
    pub correct_fake: usize,
    pub correct_real: usize,
}

impl Accuracy {
    pub fn n_total(&self) -> usize {
        self.n_fake + self.n_real
    }

    pub fn correct(&self) -> usize {
        self.correct_fake + self.correct_real
    }

    pub fn acc_all(&self) -> Option<f64> {
        ratio(self.correct(), self.n_total())
    }

    pub fn acc_fake(&self) -> Option<f64> {
        ratio(self.correct_fake, self.n_fake)
    }

    pub fn acc_real(&self) -> Option<f64> {
        ratio(self.correct_real, self.n_real)
    }
}

/// A missing composed verdict counts as wrong.
pub fn accuracy(results: &[DetectionResult], labels: &HashMap<String, GoldLabel>) -> Result<Accuracy, MetricsError> {
    let mut acc = Accuracy::default();
    for r in results {
        let gold = *labels.get(&r.claim_id).ok_or_else(|| MetricsError::MissingLabel(r.claim_id.clone()))?;
        let right = r.verdict() == Some(gold.as_verdict());
        match gold {
            GoldLabel::Fake => {
                acc.n_fake += 1;
                acc.correct_fake += right as usize;
            }
            GoldLabel::Real => {
                acc.n_real += 1;
                acc.correct_real += right as usize;
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRatio {
    pub element: f64,
    pub ent_t: f64,
    pub ent_v: f64,
    pub n_fake_predicted: usize,
}

/// Among results judged Fake, the share naming each explanation field.
/// `None` when nothing was judged Fake.
pub fn response_ratio(results: &[DetectionResult]) -> Option<ResponseRatio> {
    let fakes: Vec<_> = results.iter().filter(|r| r.verdict() == Some(Verdict::Fake)).collect();
    let n = fakes.len();
    let count = |f: &dyn Fn(&DetectionResult) -> bool| fakes.iter().filter(|r| f(r)).count();
    Some(ResponseRatio {
        element: ratio(count(&|r| r.composed.explanation.element.is_some()), n)?,
        ent_t: ratio(count(&|r| r.composed.explanation.ent_t.is_some()), n)?,
        ent_v: ratio(count(&|r| r.composed.explanation.ent_v.is_some()), n)?,
        n_fake_predicted: n,
    })
}

fn by_claim(results: &[DetectionResult]) -> HashMap<&str, &DetectionResult> {
    results.iter().map(|r| (r.claim_id.as_str(), r)).collect()
}

/// Share of gold-fake claims (those with a result) judged Fake with the
/// gold element. A missing element is a miss.
pub fn element_hit_ratio(results: &[DetectionResult], golds: &[GoldExplanation]) -> Option<f64> {
    let index = by_claim(results);
    let mut hits = 0;
    let mut n = 0;
    for g in golds {
        let Some(r) = index.get(g.claim_id.as_str()) else { continue };
        n += 1;
        let responded = r.verdict() == Some(Verdict::Fake);
        hits += (responded && r.composed.explanation.element.as_ref() == Some(&g.element)) as usize;
    }
    ratio(hits, n)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntitySimilarity {
    pub mean_sim_ent_t: Option<f64>,
    pub mean_sim_ent_v: Option<f64>,
    pub n_ent_t: usize,
    pub n_ent_v: usize,
}

/// Cosine clipped to [0, 1].
pub fn text_similarity(embedder: &dyn EmbeddingBackend, a: &str, b: &str) -> Result<f64, BackendError> {
    let u = embedder.embed(a)?;
    let v = embedder.embed(b)?;
    Ok(cosine(&u, &v).clamp(0.0, 1.0))
}

/// Mean similarity between predicted and gold entities, over the claims
/// where a prediction exists. Absent predictions show up in the response
/// ratio instead.
pub fn entity_similarity(
    results: &[DetectionResult],
    golds: &[GoldExplanation],
    embedder: &dyn EmbeddingBackend,
) -> Result<EntitySimilarity, MetricsError> {
    let index = by_claim(results);
    let (mut sum_t, mut sum_v) = (0.0, 0.0);
    let mut out = EntitySimilarity::default();
    for g in golds {
        let Some(r) = index.get(g.claim_id.as_str()) else { continue };
        let e = &r.composed.explanation;
        if let Some(t) = e.ent_t.as_deref().filter(|t| !t.trim().is_empty()) {
            sum_t += text_similarity(embedder, t, &g.ent_t)?;
            out.n_ent_t += 1;
        }
        if let Some(v) = e.ent_v.as_deref().filter(|v| !v.trim().is_empty()) {
            sum_v += text_similarity(embedder, v, &g.ent_v)?;
            out.n_ent_v += 1;
        }
    }
    out.mean_sim_ent_t = (out.n_ent_t > 0).then(|| sum_t / out.n_ent_t as f64);
    out.mean_sim_ent_v = (out.n_ent_v > 0).then(|| sum_v / out.n_ent_v as f64);
    Ok(out)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_overlap(overlap: usize, n_candidate: usize, n_reference: usize) -> Self {
        let precision = ratio(overlap, n_candidate).unwrap_or(0.0);
        let recall = ratio(overlap, n_reference).unwrap_or(0.0);
        let f1 = if overlap == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped counts. Zero if either side has no n-grams.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
    Prf::from_overlap(overlap, cand.values().sum(), refs.values().sum())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Prf {
    let c: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Prf::from_overlap(lcs_len(&c, &r), c.len(), r.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 of `candidate` against `reference`.
pub fn rouge(candidate: &str, reference: &str) -> Result<RougeScores, MetricsError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(MetricsError::ZeroLength);
    }
    Ok(RougeScores {
        rouge_1: rouge_n(&c, &r, 1).f1,
        rouge_2: rouge_n(&c, &r, 2).f1,
        rouge_l: rouge_l(&c, &r).f1,
    })
}

/// Mean ROUGE over gold-fake claims judged Fake, comparing the composed
/// answer with the reference sentence.
fn mean_rouge(results: &[DetectionResult], golds: &[GoldExplanation]) -> Option<(RougeScores, usize)> {
    let index = by_claim(results);
    let mut sum = RougeScores { rouge_1: 0.0, rouge_2: 0.0, rouge_l: 0.0 };
    let mut n = 0;
    for g in golds {
        let Some(r) = index.get(g.claim_id.as_str()) else { continue };
        if r.verdict() != Some(Verdict::Fake) {
            continue;
        }
        let Ok(s) = rouge(&r.composed.explanation.rationale, &g.reference_text()) else { continue };
        sum.rouge_1 += s.rouge_1;
        sum.rouge_2 += s.rouge_2;
        sum.rouge_l += s.rouge_l;
        n += 1;
    }
    (n > 0).then(|| {
        let k = n as f64;
        (RougeScores { rouge_1: sum.rouge_1 / k, rouge_2: sum.rouge_2 / k, rouge_l: sum.rouge_l / k }, n)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset_fraction: f64,
    pub n_total: usize,
    pub n_fake: usize,
    pub n_real: usize,
    pub correct_fake: usize,
    pub correct_real: usize,
    pub acc_all: Option<f64>,
    pub acc_fake: Option<f64>,
    pub acc_real: Option<f64>,
    /// Keys `element`, `ent_t`, `ent_v`; absent when nothing was judged Fake.
    pub response_ratio: Option<BTreeMap<String, f64>>,
    pub hit_ratio_element: Option<f64>,
    pub mean_sim_ent_t: Option<f64>,
    pub mean_sim_ent_v: Option<f64>,
    /// Entity similarity is averaged over responded items only.
    pub similarity_denominator: String,
    pub n_sim_ent_t: usize,
    pub n_sim_ent_v: usize,
    pub rouge_1: Option<f64>,
    pub rouge_2: Option<f64>,
    pub rouge_l: Option<f64>,
    pub n_rouge: usize,
    pub embedding_backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl EvalReport {
    /// (metric, value) pairs in CSV order.
    pub fn metric_values(&self) -> Vec<(&'static str, Option<f64>)> {
        let rr = |k: &str| self.response_ratio.as_ref().and_then(|m| m.get(k).copied());
        vec![
            ("acc_all", self.acc_all),
            ("acc_fake", self.acc_fake),
            ("acc_real", self.acc_real),
            ("response_ratio_element", rr("element")),
            ("response_ratio_ent_t", rr("ent_t")),
            ("response_ratio_ent_v", rr("ent_v")),
            ("hit_ratio_element", self.hit_ratio_element),
            ("mean_sim_ent_t", self.mean_sim_ent_t),
            ("mean_sim_ent_v", self.mean_sim_ent_v),
            ("rouge_1", self.rouge_1),
            ("rouge_2", self.rouge_2),
            ("rouge_l", self.rouge_l),
        ]
    }
}

pub const METRIC_COUNT: usize = 12;

pub fn build_report(
    results: &[DetectionResult],
    labels: &HashMap<String, GoldLabel>,
    golds: &[GoldExplanation],
    embedder: &dyn EmbeddingBackend,
) -> Result<EvalReport, MetricsError> {
    let acc = accuracy(results, labels)?;
    let rr = response_ratio(results).map(|r| {
        BTreeMap::from([("element".to_string(), r.element), ("ent_t".to_string(), r.ent_t), ("ent_v".to_string(), r.ent_v)])
    });
    let sim = entity_similarity(results, golds, embedder)?;
    let rouge = mean_rouge(results, golds);
    Ok(EvalReport {
        subset_fraction: 1.0,
        n_total: acc.n_total(),
        n_fake: acc.n_fake,
        n_real: acc.n_real,
        correct_fake: acc.correct_fake,
        correct_real: acc.correct_real,
        acc_all: acc.acc_all(),
        acc_fake: acc.acc_fake(),
        acc_real: acc.acc_real(),
        response_ratio: rr,
        hit_ratio_element: element_hit_ratio(results, golds),
        mean_sim_ent_t: sim.mean_sim_ent_t,
        mean_sim_ent_v: sim.mean_sim_ent_v,
        similarity_denominator: "responded_only".into(),
        n_sim_ent_t: sim.n_ent_t,
        n_sim_ent_v: sim.n_ent_v,
        rouge_1: rouge.map(|(s, _)| s.rouge_1),
        rouge_2: rouge.map(|(s, _)| s.rouge_2),
        rouge_l: rouge.map(|(s, _)| s.rouge_l),
        n_rouge: rouge.map_or(0, |(_, n)| n),
        embedding_backend_id: embedder.id().to_string(),
        manifest: None,
    })
}

/// Indices (in input order) of a seeded subset of `n` items. Subsets for
/// growing fractions under the same seed are nested.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InvalidFraction(fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).ceil() as usize).clamp(n.min(1), n);
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// One report per fraction, each over a nested seeded subset of results.
pub fn build_subset_reports(
    results: &[DetectionResult],
    labels: &HashMap<String, GoldLabel>,
    golds: &[GoldExplanation],
    embedder: &dyn EmbeddingBackend,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<EvalReport>, MetricsError> {
    fractions
        .iter()
        .map(|&f| {
            let subset: Vec<DetectionResult> =
                subset_indices(results.len(), f, seed)?.into_iter().map(|i| results[i].clone()).collect();
            let mut report = build_report(&subset, labels, golds, embedder)?;
            report.subset_fraction = f;
            Ok(report)
        })
        .collect()
}

/// Plot series: one `metric,subset,value` row per metric and report. Absent
/// values are written as empty cells.
pub fn write_plot_csv(path: &Path, reports: &[EvalReport]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "subset", "value"])?;
    for r in reports {
        let subset = r.subset_fraction.to_string();
        for (metric, value) in r.metric_values() {
            let value = value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([metric, subset.as_str(), value.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}
