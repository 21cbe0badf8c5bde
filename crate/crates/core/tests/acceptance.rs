//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use sniffer_core::backend::{
    cosine, CachedBackend, CompletionBackend, EmbeddingBackend, HashedBagOfWords, ResponseCache, ScriptRule,
    ScriptedBackend,
};
use sniffer_core::evidence::{Evidence, EvidencePage, EvidenceStore};
use sniffer_core::instructgen::{build_stage2, CaptionPair, FakePairSource, InstructionKind, Stage2Options};
use sniffer_core::metrics::{
    accuracy, build_report, element_hit_ratio, response_ratio, rouge, GoldExplanation,
};
use sniffer_core::parser::{parse_generated_inconsistency, parse_verdict, render_fake_target};
use sniffer_core::pipeline::{detect_batch, write_results_jsonl, PipelineConfig, PipelineContext};
use sniffer_core::{
    CheckOutcome, Claim, DetectionResult, Explanation, GoldLabel, ImageRef, NewsElement, ParseStatus, Stage, Verdict,
};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Outcome {
    check(elapsed < Duration::from_secs(limit_secs), || format!("took {elapsed:?}, limit {limit_secs}s"))
}

// ---------------------------------------------------------------- 1

const ENTITY_CHARS: &[char] = &[
    'a', 'b', 'k', 'q', 'z', 'A', 'M', 'X', '0', '7', ' ', ' ', ',', ',', '"', '"', '\'', '-', '&', '(', ')', 'é',
];

fn random_entity(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.gen_range(1..=30);
        let mut s: String = (0..len).map(|_| ENTITY_CHARS[rng.gen_range(0..ENTITY_CHARS.len())]).collect();
        match rng.gen_range(0..6) {
            0 => s.push_str(" Jr."),
            1 => s = format!("U.S {s}"),
            2 => s = format!("\"{s}\""),
            _ => {}
        }
        let s = s.trim().to_string();
        if !s.is_empty() {
            return s;
        }
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let elements: Vec<NewsElement> = NewsElement::CLOSED_SET
        .iter()
        .cloned()
        .chain([NewsElement::Other("weather".into()), NewsElement::Other("sports team".into())])
        .collect();
    let n = 2000;
    let (mut with_comma, mut with_quote) = (0, 0);
    for i in 0..n {
        let element = elements[i % elements.len()].clone();
        let (t, v) = (random_entity(&mut rng), random_entity(&mut rng));
        with_comma += (t.contains(',') || v.contains(',')) as usize;
        with_quote += (t.contains(['"', '\'']) || v.contains(['"', '\''])) as usize;
        let target = render_fake_target(&element, &t, &v).map_err(|e| format!("render failed: {e}"))?;
        let o = parse_verdict(&target, Stage::Internal);
        check(
            o.verdict == Some(Verdict::Fake)
                && o.parse_status == ParseStatus::Structured
                && o.explanation.element.as_ref() == Some(&element)
                && o.explanation.ent_t.as_deref() == Some(t.as_str())
                && o.explanation.ent_v.as_deref() == Some(v.as_str()),
            || format!("triple {i} ({element}, {t:?}, {v:?}) parsed as {:?}", o.explanation),
        )?;
    }
    check(with_comma > n / 4 && with_quote > n / 4, || format!("generator coverage: {with_comma} comma, {with_quote} quote"))?;
    within(started.elapsed(), 5)
}

// ---------------------------------------------------------------- 2

#[derive(Deserialize)]
struct PinnedResponse {
    name: String,
    text: String,
    verdict: Option<Verdict>,
    status: ParseStatus,
    element: Option<String>,
    #[serde(default)]
    ent_t: Option<String>,
    #[serde(default)]
    ent_v: Option<String>,
}

fn criterion_2() -> Outcome {
    let pinned: Vec<PinnedResponse> =
        serde_json::from_str(include_str!("fixtures/published_responses.json")).map_err(|e| e.to_string())?;
    let by_name: HashMap<&str, &PinnedResponse> = pinned.iter().map(|p| (p.name.as_str(), p)).collect();
    for p in &pinned {
        let o = parse_verdict(&p.text, Stage::Internal);
        check(o.verdict == p.verdict, || format!("{}: verdict {:?}, pinned {:?}", p.name, o.verdict, p.verdict))?;
        check(o.parse_status == p.status, || format!("{}: status {:?}, pinned {:?}", p.name, o.parse_status, p.status))?;
        let element = o.explanation.element.as_ref().map(|e| e.to_string());
        check(element == p.element, || format!("{}: element {element:?}, pinned {:?}", p.name, p.element))?;
        if p.ent_t.is_some() || p.ent_v.is_some() {
            check(o.explanation.ent_t == p.ent_t && o.explanation.ent_v == p.ent_v, || {
                format!("{}: entities {:?}/{:?}", p.name, o.explanation.ent_t, o.explanation.ent_v)
            })?;
        }
    }

    let get = |name: &str| by_name.get(name).copied().ok_or_else(|| format!("fixture lacks {name}"));
    check(get("instructblip_saturn")?.status == ParseStatus::NonCompliant, || "InstructBLIP must be NonCompliant".into())?;
    let llava = get("llava_adapter_v2_saturn")?;
    check(
        llava.verdict == Some(Verdict::Fake) && llava.status != ParseStatus::NonCompliant,
        || "LLaVA-Adapter-V2 must be Fake".into(),
    )?;
    check(get("woodpecker_saturn")?.verdict == Some(Verdict::Fake), || "Woodpecker must be Fake".into())?;

    let order = ["gpt4v_case1", "detector_case1", "gpt4v_case2", "detector_case2", "gpt4v_case3", "detector_case3"];
    let expected = [Verdict::Real, Verdict::Fake, Verdict::Fake, Verdict::Real, Verdict::Fake, Verdict::Real];
    for (name, want) in order.iter().zip(expected) {
        let got = parse_verdict(&get(name)?.text, Stage::Composed).verdict;
        check(got == Some(want), || format!("{name}: {got:?}, expected {want:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let skat = FakePairSource {
        id: "skat".into(),
        cap_ori: "John Constable's Brightwell Church and Village was part of the 2013 exhibition".into(),
        cap_new: "From J Charles Eichhorn's American Skat or The Game of Skat Defined".into(),
        image: ImageRef::parse("img/brightwell.jpg"),
        basic_description: "This image describes a rural landscape with a farmhouse, a barn, and a field. The farmhouse is situated in the middle of the field, surrounded by the barn and the open land. The painting captures the essence of a peaceful, pastoral setting, with the farmhouse serving as the central focus of the scene.".into(),
    };
    let huhne = FakePairSource {
        id: "huhne".into(),
        cap_ori: "Chris Huhne is among the ministers expected to address delegates at next week's Lib Dem conference".into(),
        cap_new: "Urs Rohner CEO of Credit Suisse participates in a panel session in Bern Switzerland on Tuesday".into(),
        image: ImageRef::parse("img/huhne.jpg"),
        basic_description: "The image depicts a man wearing a suit and tie, standing at a podium with a microphone in front of him. He appears to be giving a speech or addressing an audience. In the background, there is a black screen or backdrop.".into(),
    };
    let skat_answer = r"They are inconsistent in artwork. The artwork in caption_new is American Skat or The Game of Skat Defined, and the artwork in image_ori is Brightwell Church and Village. \n Element: artwork \n Entity_caption: American Skat or The Game of Skat Defined \n Entity_image: Brightwell Church and Village";
    let huhne_answer = r"They are inconsistent in person. The person in caption_new is Urs Rohner, and the person in image_ori is Chris Huhne. \n Element: person \n Entity_caption: Urs Rohner \n Entity_image: Chris Huhne";
    // The query repeats the in-context examples, so match on the final
    // caption line, which is followed by the double-spaced description label.
    let rule = |f: &FakePairSource, answer: &str| {
        ScriptRule::new(format!("Caption_new:  {}\nBasic description of image_ori:  ", f.cap_new), answer)
    };
    let generator = ScriptedBackend::new("generator", vec![rule(&skat, skat_answer), rule(&huhne, huhne_answer)]);
    let reals: Vec<CaptionPair> = (0..2)
        .map(|i| CaptionPair { id: format!("r{i}"), image: ImageRef::parse(&format!("img/r{i}.jpg")), caption: format!("Real caption {i}.") })
        .collect();
    let (records, log) =
        build_stage2(&[skat, huhne], &reals, &generator, Stage2Options::default()).map_err(|e| e.to_string())?;
    check(log.skipped.is_empty(), || format!("skipped: {:?}", log.skipped))?;

    let expected = [
        ("artwork", "American Skat or The Game of Skat Defined", "Brightwell Church and Village"),
        ("person", "Urs Rohner", "Chris Huhne"),
    ];
    let fakes: Vec<_> = records.iter().filter(|r| r.kind == InstructionKind::OocFake).collect();
    check(fakes.len() == 2, || format!("{} fake records", fakes.len()))?;
    for (record, (element, t, v)) in fakes.iter().zip(expected) {
        let p = &record.provenance;
        check(p["element"] == element && p["ent_t"] == t && p["ent_v"] == v, || format!("provenance {p:?}"))?;
    }
    for (answer, (element, t, v)) in [skat_answer, huhne_answer].iter().zip(expected) {
        let g = parse_generated_inconsistency(answer).map_err(|e| e.to_string())?;
        check(g.element.as_str() == element && g.ent_t == t && g.ent_v == v, || format!("{g:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 4

fn dp_lcs(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

fn f1(overlap: usize, n_cand: usize, n_ref: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_cand as f64;
    let r = overlap as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

fn clipped_ngram_f1(a: &[&str], b: &[&str], n: usize) -> f64 {
    let grams = |s: &[&str]| {
        let mut m: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for i in 0..s.len().saturating_sub(n - 1) {
            *m.entry(s[i..i + n].iter().map(|w| w.to_string()).collect()).or_default() += 1;
        }
        m
    };
    let (ga, gb) = (grams(a), grams(b));
    let overlap: usize = ga.iter().map(|(g, c)| (*c).min(*gb.get(g).unwrap_or(&0))).sum();
    f1(overlap, ga.values().sum(), gb.values().sum())
}

const VOCAB: &[&str] = &["the", "cat", "sat", "on", "mat", "dog", "ran", "a", "red", "hat"];

fn random_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let len = rng.gen_range(1..=40);
    (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect()
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..200 {
        let (a, b) = (random_words(&mut rng), random_words(&mut rng));
        let got = rouge(&a.join(" "), &b.join(" ")).map_err(|e| e.to_string())?;
        let want = f1(dp_lcs(&a, &b), a.len(), b.len());
        check((got.rouge_l - want).abs() <= 1e-12, || format!("pair {i}: rouge-l {} vs oracle {want}", got.rouge_l))?;
        if i < 50 {
            let (w1, w2) = (clipped_ngram_f1(&a, &b, 1), clipped_ngram_f1(&a, &b, 2));
            check((got.rouge_1 - w1).abs() <= 1e-12, || format!("pair {i}: rouge-1 {} vs {w1}", got.rouge_1))?;
            check((got.rouge_2 - w2).abs() <= 1e-12, || format!("pair {i}: rouge-2 {} vs {w2}", got.rouge_2))?;
        }
    }
    within(started.elapsed(), 10)
}

// ---------------------------------------------------------------- 5

fn outcome(stage: Stage, verdict: Option<Verdict>, explanation: Explanation, raw: &str) -> CheckOutcome {
    CheckOutcome {
        stage,
        verdict,
        explanation,
        raw_response: raw.into(),
        parse_status: if verdict.is_some() { ParseStatus::Structured } else { ParseStatus::NonCompliant },
    }
}

fn synthetic_result(id: &str, verdict: Option<Verdict>, explanation: Explanation) -> DetectionResult {
    let raw = explanation.rationale.clone();
    DetectionResult {
        claim_id: id.into(),
        internal: outcome(Stage::Internal, verdict, explanation.clone(), &raw),
        external: None,
        composed: outcome(Stage::Composed, verdict, explanation, &raw),
        evidence_used: false,
        model_calls: 1,
        backend_calls: 1,
        failure: None,
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..100 {
        let n = rng.gen_range(1..=300);
        let mut results = Vec::new();
        let mut labels = HashMap::new();
        let (mut nf, mut nr, mut cf, mut cr) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            let id = format!("s{set}-{i}");
            let p_fake = rng.gen_range(0.1..0.9);
            let gold = if rng.gen_bool(p_fake) { GoldLabel::Fake } else { GoldLabel::Real };
            let verdict = match rng.gen_range(0..10) {
                0 => None,
                1..=3 => Some(if gold == GoldLabel::Fake { Verdict::Real } else { Verdict::Fake }),
                _ => Some(if gold == GoldLabel::Fake { Verdict::Fake } else { Verdict::Real }),
            };
            let right = verdict.is_some() && (verdict == Some(Verdict::Fake)) == (gold == GoldLabel::Fake);
            match gold {
                GoldLabel::Fake => {
                    nf += 1;
                    cf += right as usize;
                }
                GoldLabel::Real => {
                    nr += 1;
                    cr += right as usize;
                }
            }
            labels.insert(id.clone(), gold);
            results.push(synthetic_result(&id, verdict, Explanation::default()));
        }
        let acc = accuracy(&results, &labels).map_err(|e| e.to_string())?;
        check((acc.n_fake, acc.n_real, acc.correct_fake, acc.correct_real) == (nf, nr, cf, cr), || {
            format!("set {set}: counts {acc:?} vs ({nf}, {nr}, {cf}, {cr})")
        })?;
        // Exact identity over counts: acc_all·n = acc_fake·n_fake + acc_real·n_real,
        // i.e. correct = correct_fake + correct_real with the same denominators.
        check(acc.correct() == acc.correct_fake + acc.correct_real && acc.n_total() == n, || format!("set {set}: identity"))?;
        let all = acc.acc_all().unwrap();
        check(all == (cf + cr) as f64 / n as f64, || format!("set {set}: acc_all not derived from counts"))?;
        let weighted = (acc.acc_fake().unwrap_or(0.0) * nf as f64 + acc.acc_real().unwrap_or(0.0) * nr as f64) / n as f64;
        check((all - weighted).abs() <= 1e-12, || format!("set {set}: {all} vs weighted {weighted}"))?;
        for r in [acc.acc_all(), acc.acc_fake(), acc.acc_real()].into_iter().flatten() {
            check((0.0..=1.0).contains(&r), || format!("set {set}: ratio {r} out of range"))?;
        }
        let report = build_report(&results, &labels, &[], &HashedBagOfWords::default()).map_err(|e| e.to_string())?;
        check(report.acc_all == acc.acc_all() && report.n_total == n, || format!("set {set}: report disagrees"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 6, 7

const FAKE_HEAD: &str = "No, the image is wrongly used in a different news context.";
const REAL_ANSWER: &str = "Yes, the image is rightly used in the given news context.";

fn fake_answer(i: usize) -> String {
    format!(
        "{FAKE_HEAD} The given news caption and image are inconsistent in person. The person in the caption is Person{i}, and the person in the image is Other{i}."
    )
}

struct PipelineFixture {
    claims: Vec<Claim>,
    evidence: Arc<EvidenceStore>,
    vision_rules: Vec<ScriptRule>,
    chat_rules: Vec<ScriptRule>,
    without_evidence: Vec<String>,
}

/// 20 claims; claims 0..12 have evidence. Internal answers alternate, and a
/// few evidence-backed claims have the composer overrule the internal check.
fn pipeline_fixture(dir: &Path) -> PipelineFixture {
    let mut claims = Vec::new();
    let mut entries = Vec::new();
    let mut vision_rules = Vec::new();
    let mut chat_rules = Vec::new();
    let mut without_evidence = Vec::new();
    for i in 0..20 {
        let id = format!("c{i:02}");
        let img = dir.join(format!("{id}.jpg"));
        std::fs::write(&img, format!("image bytes {i}")).unwrap();
        let caption = format!("Person{i} attends meeting number {i} downtown.");
        let internal_fake = i % 3 != 1;
        let internal = if internal_fake { fake_answer(i) } else { REAL_ANSWER.to_string() };
        vision_rules.push(ScriptRule::new(format!("News caption: {caption}\n"), internal.clone()));
        if i < 12 {
            entries.push(Evidence {
                claim_id: id.clone(),
                pages: (0..(i % 5 + 1))
                    .map(|p| EvidencePage { url: format!("https://ex.org/{id}/{p}"), title: None, body: format!("Page {p} on meeting {i}.") })
                    .collect(),
                visual_entities: vec![format!("Other{i}")],
            });
            let composed = if i % 4 == 0 { fake_answer(i) } else { internal.clone() };
            chat_rules.push(ScriptRule::new(format!("{caption}\nEvidence"), fake_answer(i)));
            chat_rules.push(ScriptRule::new(format!("{caption}\nImage-text"), composed));
        } else {
            without_evidence.push(id.clone());
        }
        let label = if i % 2 == 0 { GoldLabel::Fake } else { GoldLabel::Real };
        claims.push(Claim::new(id, caption, ImageRef::Path(img)).unwrap().with_label(label));
    }
    PipelineFixture {
        claims,
        evidence: Arc::new(EvidenceStore::from_entries(entries)),
        vision_rules,
        chat_rules,
        without_evidence,
    }
}

struct Run {
    bytes: Vec<u8>,
    results: Vec<DetectionResult>,
    network_calls: usize,
    cache_hit_rate: Option<f64>,
    inner_calls: usize,
}

fn run_pipeline(fx: &PipelineFixture, cache: Option<&Path>, concurrency: usize, out: &Path) -> Run {
    let vision = Arc::new(ScriptedBackend::new("vision", fx.vision_rules.clone()));
    let chat = Arc::new(ScriptedBackend::new("chat", fx.chat_rules.clone()));
    let wrap = |b: Arc<ScriptedBackend>| -> Arc<dyn CompletionBackend> {
        match cache {
            Some(dir) => Arc::new(CachedBackend::new(b, ResponseCache::new(dir))),
            None => b,
        }
    };
    let ctx = PipelineContext::new(wrap(vision.clone()), wrap(chat.clone()), fx.evidence.clone())
        .with_config(PipelineConfig { concurrency, ..PipelineConfig::default() });
    let (results, manifest) = detect_batch(&fx.claims, &ctx).unwrap();
    write_results_jsonl(out, &results).unwrap();
    Run {
        bytes: std::fs::read(out).unwrap(),
        results,
        network_calls: manifest.network_calls,
        cache_hit_rate: manifest.cache_hit_rate,
        inner_calls: vision.call_count() + chat.call_count(),
    }
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = pipeline_fixture(dir.path());
    let cache = dir.path().join("cache");
    let first = run_pipeline(&fx, Some(&cache), 1, &dir.path().join("r1.jsonl"));
    let second = run_pipeline(&fx, Some(&cache), 8, &dir.path().join("r2.jsonl"));
    let uncached = run_pipeline(&fx, None, 8, &dir.path().join("r3.jsonl"));

    check(first.results.len() == 20 && first.results.iter().all(|r| r.failure.is_none()), || "first run incomplete".into())?;
    check(first.network_calls > 0 && first.cache_hit_rate == Some(0.0), || format!("first run: {} network calls", first.network_calls))?;
    check(first.bytes == second.bytes, || "cached rerun at concurrency 8 differs".into())?;
    check(first.bytes == uncached.bytes, || "uncached run at concurrency 8 differs".into())?;
    check(second.network_calls == 0 && second.inner_calls == 0, || format!("second run made {} network calls", second.network_calls))?;
    check(second.cache_hit_rate == Some(1.0), || format!("cache hit rate {:?}", second.cache_hit_rate))?;
    check(first.results.iter().map(|r| &r.claim_id).eq(fx.claims.iter().map(|c| &c.id)), || "order differs from input".into())?;
    within(started.elapsed(), 30)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = pipeline_fixture(dir.path());
    check(!fx.without_evidence.is_empty(), || "fixture has no evidence-free claims".into())?;
    let run = run_pipeline(&fx, None, 4, &dir.path().join("r.jsonl"));
    let mut seen = 0;
    let mut verdicts = Vec::new();
    for r in run.results.iter().filter(|r| fx.without_evidence.contains(&r.claim_id)) {
        seen += 1;
        check(r.external.is_none() && !r.evidence_used, || format!("{}: external present", r.claim_id))?;
        check(r.composed.verdict == r.internal.verdict, || format!("{}: composed differs from internal", r.claim_id))?;
        verdicts.push(r.internal.verdict);
    }
    check(seen == fx.without_evidence.len(), || format!("{seen} of {} evidence-free claims seen", fx.without_evidence.len()))?;
    check(verdicts.contains(&Some(Verdict::Fake)) && verdicts.contains(&Some(Verdict::Real)), || "fixture lacks verdict variety".into())?;
    // The composer did get to overrule where evidence exists.
    let overruled = run.results.iter().filter(|r| r.external.is_some() && r.composed.verdict != r.internal.verdict).count();
    check(overruled > 0, || "no evidence-backed claim was overruled".into())
}

// ---------------------------------------------------------------- 8

fn fake_source(i: usize) -> FakePairSource {
    FakePairSource {
        id: format!("f{i}"),
        cap_new: format!("New caption {i} names Person{i}."),
        cap_ori: format!("Old caption {i} names Other{i}."),
        image: ImageRef::parse(&format!("img/f{i}.jpg")),
        basic_description: "A person at a podium.".into(),
    }
}

fn criterion_8() -> Outcome {
    let reals: Vec<CaptionPair> = (0..40)
        .map(|i| CaptionPair { id: format!("r{i}"), image: ImageRef::parse(&format!("img/r{i}.jpg")), caption: format!("Pristine caption {i}.") })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases: Vec<(usize, Vec<usize>, Vec<usize>)> = vec![(10, vec![2, 5, 8], vec![])];
    for _ in 0..30 {
        let n = rng.gen_range(0..=25);
        let malformed: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.2)).collect();
        let unreachable: Vec<usize> = (0..n).filter(|i| !malformed.contains(i) && rng.gen_bool(0.1)).collect();
        cases.push((n, malformed, unreachable));
    }
    for (case, (n, malformed, unreachable)) in cases.iter().enumerate() {
        let fakes: Vec<_> = (0..*n).map(fake_source).collect();
        let rules = (0..*n)
            .filter(|i| !unreachable.contains(i))
            .map(|i| {
                let reply = if malformed.contains(&i) {
                    format!("They are inconsistent in person. \\n Element: person \\n Entity_image: Other{i}")
                } else {
                    format!("They are inconsistent in person. The person in caption_new is Person{i}, and the person in image_ori is Other{i}. \\n Element: person \\n Entity_caption: Person{i} \\n Entity_image: Other{i}")
                };
                ScriptRule::new(format!("Caption_new:  New caption {i} "), reply)
            })
            .collect();
        let generator = ScriptedBackend::new("generator", rules);
        let (records, log) = build_stage2(&fakes, &reals, &generator, Stage2Options { seed: case as u64, concurrency: 3 })
            .map_err(|e| format!("case {case}: {e}"))?;
        let fake = records.iter().filter(|r| r.kind == InstructionKind::OocFake).count();
        let real = records.iter().filter(|r| r.kind == InstructionKind::OocReal).count();
        let failures = malformed.len() + unreachable.len();
        check(fake == real, || format!("case {case}: {fake} fake vs {real} real"))?;
        check(fake == n - failures && log.skipped.len() == failures, || {
            format!("case {case}: {fake} generated, {} skipped, {failures} injected", log.skipped.len())
        })?;
        check(log.missing_field_skips() == malformed.len(), || format!("case {case}: missing-field skips"))?;
        if case == 0 {
            check((fake, real) == (7, 7), || format!("10 fakes with 3 malformed gave {fake} + {real}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 9

fn with_element(element: Option<NewsElement>) -> Explanation {
    Explanation { element, ..Default::default() }
}

fn criterion_9() -> Outcome {
    use NewsElement::*;
    // (prediction verdict, predicted element, gold element)
    let rows = [
        (Some(Verdict::Fake), Some(Person), Person),
        (Some(Verdict::Fake), Some(Place), Person),
        (Some(Verdict::Fake), None, Event),
        (Some(Verdict::Real), None, Time),
        (Some(Verdict::Fake), Some(Time), Time),
        (Some(Verdict::Fake), Some(Event), Event),
        (Some(Verdict::Fake), None, Place),
        (None, None, Artwork),
        (Some(Verdict::Fake), Some(Artwork), Object),
        (Some(Verdict::Fake), Some(Object), Object),
    ];
    let mut results = Vec::new();
    let mut golds = Vec::new();
    for (i, (verdict, predicted, gold)) in rows.into_iter().enumerate() {
        let id = format!("g{i}");
        results.push(synthetic_result(&id, verdict, with_element(predicted)));
        golds.push(GoldExplanation { claim_id: id, element: gold, ent_t: "t".into(), ent_v: "v".into() });
    }
    // By hand: 8 judged Fake, 6 of them name an element; 4 of 10 hit.
    let rr = response_ratio(&results).ok_or("no response ratio")?;
    let hit = element_hit_ratio(&results, &golds).ok_or("no hit ratio")?;
    check(rr.element == 6.0 / 8.0, || format!("response ratio {}", rr.element))?;
    check(hit == 4.0 / 10.0, || format!("hit ratio {hit}"))?;
    check(hit <= rr.element, || "hit ratio exceeds response ratio".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let all: Vec<NewsElement> = NewsElement::CLOSED_SET.to_vec();
    for set in 0..200 {
        let n = rng.gen_range(1..30);
        let mut results = Vec::new();
        let mut golds = Vec::new();
        for i in 0..n {
            let id = format!("s{set}-{i}");
            let verdict = [None, Some(Verdict::Real), Some(Verdict::Fake), Some(Verdict::Fake)][rng.gen_range(0..4)];
            let predicted = rng.gen_bool(0.6).then(|| all[rng.gen_range(0..all.len())].clone());
            results.push(synthetic_result(&id, verdict, with_element(predicted)));
            golds.push(GoldExplanation { claim_id: id, element: all[rng.gen_range(0..all.len())].clone(), ent_t: "t".into(), ent_v: "v".into() });
        }
        let hit = element_hit_ratio(&results, &golds).unwrap_or(0.0);
        let responded = response_ratio(&results).map_or(0.0, |r| r.element);
        check((0.0..=1.0).contains(&hit) && hit <= responded, || format!("set {set}: hit {hit} > response {responded}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let emb = HashedBagOfWords::default();
    for text in ["Chris Huhne", "Brightwell Church and Village", "the pope", "U.S. Capitol, Washington"] {
        let v = emb.embed(text).map_err(|e| e.to_string())?;
        let s = cosine(&v, &v);
        check((s - 1.0).abs() <= 1e-9, || format!("self-similarity of {text:?} is {s}"))?;
    }
    // Token-disjoint pair whose tokens land in disjoint buckets.
    let left = ["alpha", "bravo"];
    let right = ["charlie", "delta"];
    let buckets = |ws: &[&str]| ws.iter().map(|w| emb.bucket(w)).collect::<Vec<_>>();
    let (bl, br) = (buckets(&left), buckets(&right));
    check(bl.iter().all(|b| !br.contains(b)), || "fixture tokens collide".into())?;
    let s = cosine(&emb.embed(&left.join(" ")).unwrap(), &emb.embed(&right.join(" ")).unwrap());
    check(s.abs() <= 1e-9, || format!("disjoint similarity {s}"))?;

    // Report means: ent_t over three responses {1, 1, 0} → 2/3; one claim
    // without a prediction is left out. ent_v over two responses {1, 0} → 1/2.
    let explanation = |t: Option<&str>, v: Option<&str>| Explanation {
        element: Some(NewsElement::Person),
        ent_t: t.map(String::from),
        ent_v: v.map(String::from),
        rationale: "No, the image is wrongly used.".into(),
    };
    let results = vec![
        synthetic_result("e0", Some(Verdict::Fake), explanation(Some("Urs Rohner"), Some("Chris Huhne"))),
        synthetic_result("e1", Some(Verdict::Fake), explanation(Some("tim henman"), None)),
        synthetic_result("e2", Some(Verdict::Fake), explanation(Some("alpha bravo"), Some("alpha bravo"))),
        synthetic_result("e3", Some(Verdict::Fake), explanation(None, None)),
    ];
    let golds = vec![
        GoldExplanation { claim_id: "e0".into(), element: NewsElement::Person, ent_t: "Urs Rohner".into(), ent_v: "Chris Huhne".into() },
        GoldExplanation { claim_id: "e1".into(), element: NewsElement::Person, ent_t: "Tim Henman".into(), ent_v: "x".into() },
        GoldExplanation { claim_id: "e2".into(), element: NewsElement::Person, ent_t: "charlie delta".into(), ent_v: "charlie delta".into() },
        GoldExplanation { claim_id: "e3".into(), element: NewsElement::Person, ent_t: "y".into(), ent_v: "z".into() },
    ];
    let labels: HashMap<String, GoldLabel> = golds.iter().map(|g| (g.claim_id.clone(), GoldLabel::Fake)).collect();
    let report = build_report(&results, &labels, &golds, &emb).map_err(|e| e.to_string())?;
    let t = report.mean_sim_ent_t.ok_or("no ent_t mean")?;
    let v = report.mean_sim_ent_v.ok_or("no ent_v mean")?;
    check((t - 2.0 / 3.0).abs() <= 1e-9 && report.n_sim_ent_t == 3, || format!("mean_sim_ent_t {t} over {}", report.n_sim_ent_t))?;
    check((v - 0.5).abs() <= 1e-9 && report.n_sim_ent_v == 2, || format!("mean_sim_ent_v {v} over {}", report.n_sim_ent_v))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("parser round-trip over 2000 rendered triples", criterion_1),
        ("pinned published responses parse as expected", criterion_2),
        ("in-context generator examples replay exactly", criterion_3),
        ("ROUGE matches LCS and clipped-count oracles", criterion_4),
        ("accuracy weighted-mean identity on 100 sets", criterion_5),
        ("20-claim pipeline determinism and cache reuse", criterion_6),
        ("no-evidence claims keep the internal verdict", criterion_7),
        ("stage-2 fake/real balance under injected failures", criterion_8),
        ("hit ratio bounded by response ratio, hand fixture", criterion_9),
        ("embedding similarity sanity and report means", criterion_10),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(()) => writeln!(out, "PASS criterion {}: {name}", i + 1).unwrap(),
            Err(why) => {
                writeln!(out, "FAIL criterion {}: {name}: {why}", i + 1).unwrap();
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
