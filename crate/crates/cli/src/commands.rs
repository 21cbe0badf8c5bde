use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use sniffer_core::evidence::{ingest_evidence, load_claims, EvidenceStore, IngestError};
use sniffer_core::instructgen::{
    build_stage1, build_stage2, load_fake_pairs, real_pairs, validate_records, write_records_jsonl, CaptionPair,
    InstructGenError, InstructionManifest, RecordCounts, Stage2Options,
};
use sniffer_core::metrics::{build_subset_reports, labels_from_claims, load_gold_explanations, write_plot_csv, MetricsError};
use sniffer_core::pipeline::{detect as detect_one, detect_batch, read_results_jsonl, write_results_jsonl, EntitySource, PipelineContext};
use sniffer_core::prompts::PromptCatalog;
use sniffer_core::{Claim, GoldLabel, Verdict};

use crate::config::RunConfig;

/// Marks an error as a validation failure (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(err: impl fmt::Display) -> anyhow::Error {
    anyhow!(Invalid(format!("{err:#}")))
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<Invalid>()) {
        2
    } else {
        1
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| invalid(format!("{flag} is required")))
}

fn report_ingest_error(what: &str, err: &IngestError) {
    match err {
        IngestError::Schema(lines) => {
            for l in lines {
                eprintln!("{what}: {l}");
            }
        }
        other => eprintln!("{what}: {other}"),
    }
}

fn claims_from(cfg: &RunConfig) -> Result<Vec<Claim>> {
    load_claims(required(&cfg.claims, "--claims")?).map_err(|e| {
        report_ingest_error("claims", &e);
        invalid(format!("claims file rejected: {e}"))
    })
}

fn evidence_from(cfg: &RunConfig) -> Result<EvidenceStore> {
    match &cfg.evidence {
        None => Ok(EvidenceStore::default()),
        Some(path) => ingest_evidence(path).map_err(|e| {
            report_ingest_error("evidence", &e);
            invalid(format!("evidence file rejected: {e}"))
        }),
    }
}

fn create_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let claims = load_claims(required(&cfg.claims, "--claims")?);
    let evidence = cfg.evidence.as_deref().map(ingest_evidence);
    let mut failed = false;
    if let Err(e) = &claims {
        report_ingest_error("claims", e);
        failed = true;
    }
    if let Some(Err(e)) = &evidence {
        report_ingest_error("evidence", e);
        failed = true;
    }
    if let Ok(claims) = &claims {
        let count = |l: Option<GoldLabel>| claims.iter().filter(|c| c.gold_label == l).count();
        println!(
            "claims: {} (fake {}, real {}, unlabeled {})",
            claims.len(),
            count(Some(GoldLabel::Fake)),
            count(Some(GoldLabel::Real)),
            count(None)
        );
    }
    if let Some(Ok(store)) = &evidence {
        println!("evidence entries: {}", store.len());
        for w in store.warnings() {
            eprintln!("evidence warning: {w}");
        }
        if let Ok(claims) = &claims {
            let covered = claims
                .iter()
                .filter(|c| store.lookup(&c.id).is_some_and(|e| !e.pages.is_empty()))
                .count();
            println!("evidence coverage: {:.3} ({covered}/{} claims)", store.coverage(claims), claims.len());
        }
    }
    if failed {
        return Err(invalid("input files have schema errors"));
    }
    Ok(())
}

pub fn build_instructions(cfg: &RunConfig, stage: u8) -> Result<()> {
    let claims = claims_from(cfg)?;
    let seed = cfg.seed();
    let (records, generator, skipped) = if stage == 1 {
        let pairs: Vec<CaptionPair> =
            claims.iter().filter(|c| c.gold_label != Some(GoldLabel::Fake)).map(CaptionPair::from).collect();
        let records = build_stage1(&pairs, seed).map_err(invalid)?;
        (records, None, Vec::new())
    } else {
        let fakes = load_fake_pairs(required(&cfg.fakes, "--fakes")?).map_err(|e| {
            report_ingest_error("fakes", &e);
            invalid(format!("fakes file rejected: {e}"))
        })?;
        let chat = cfg.completion_backend("chat").map_err(invalid)?;
        let options = Stage2Options { seed, concurrency: cfg.pipeline().map_err(invalid)?.concurrency };
        let (records, log) = build_stage2(&fakes, &real_pairs(&claims), chat.as_ref(), options).map_err(|e| match e {
            InstructGenError::InsufficientReals { .. } => invalid(e),
            other => anyhow!(other),
        })?;
        for s in &log.skipped {
            eprintln!("skipped {}: {:?}", s.source_id, s.reason);
        }
        if log.attempted > 0 && log.generated == 0 {
            return Err(anyhow!("all {} generation requests failed", log.attempted));
        }
        (records, Some(chat.model_id().to_string()), log.skipped)
    };

    let dir = create_out_dir(cfg)?;
    let records_path = dir.join(format!("instructions_stage{stage}.jsonl"));
    write_records_jsonl(&records_path, &records)?;
    let counts = RecordCounts::of(&records);
    let manifest = InstructionManifest {
        stage,
        seed,
        prompt_catalog_checksum: PromptCatalog::builtin().checksum().to_string(),
        generator_model_id: generator,
        counts: counts.clone(),
        skipped,
    };
    write_json(&dir.join(format!("instructions_stage{stage}.manifest.json")), &manifest)?;
    println!(
        "wrote {} records to {} (caption_align {}, ooc_fake {}, ooc_real {})",
        records.len(),
        records_path.display(),
        counts.caption_align,
        counts.ooc_fake,
        counts.ooc_real
    );

    let report = validate_records(&records);
    for v in &report.violations {
        eprintln!("record {}: {}", v.index, v.message);
    }
    for (first, dup) in &report.duplicates {
        eprintln!("record {dup}: duplicates record {first}");
    }
    if !report.ok {
        return Err(invalid("instruction records failed validation"));
    }
    Ok(())
}

fn context_for(cfg: &RunConfig, evidence: EvidenceStore) -> Result<PipelineContext> {
    let config = cfg.pipeline().map_err(invalid)?;
    let entity_client = cfg.entity_client()?;
    if config.entity_source == EntitySource::Live && entity_client.is_none() {
        return Err(invalid("--entity-source live needs an `entities` section in the config"));
    }
    let vision = cfg.completion_backend("vision").map_err(invalid)?;
    let chat = cfg.completion_backend("chat").map_err(invalid)?;
    let mut ctx = PipelineContext::new(vision, chat, Arc::new(evidence))
        .with_config(config)
        .with_embedding(cfg.embedding_backend()?);
    if let Some(client) = entity_client {
        ctx = ctx.with_entity_client(client);
    }
    Ok(ctx)
}

pub fn detect(cfg: &RunConfig, claim_id: Option<&str>) -> Result<()> {
    let claims = claims_from(cfg)?;
    let evidence = evidence_from(cfg)?;
    let ctx = context_for(cfg, evidence)?;

    if let Some(id) = claim_id {
        let claim = claims.iter().find(|c| c.id == id).ok_or_else(|| invalid(format!("no claim with id {id}")))?;
        let result = detect_one(claim, &ctx);
        let verdict = match result.verdict() {
            Some(Verdict::Fake) => "fake",
            Some(Verdict::Real) => "real",
            None => "none",
        };
        println!("claim {id}: {verdict}");
        println!("{}", result.composed.raw_response.trim());
        if let Some(f) = &result.failure {
            return Err(anyhow!("claim {id} failed: {f}"));
        }
        return Ok(());
    }

    let (results, mut manifest) = detect_batch(&claims, &ctx)?;
    manifest.seed = cfg.seed;
    let dir = create_out_dir(cfg)?;
    write_results_jsonl(&dir.join("results.jsonl"), &results)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    let c = &manifest.stage_counts;
    println!(
        "detected {} claims: fake {}, real {}, no verdict {}; {} model calls, {} uncached",
        results.len(),
        c.composed_fake,
        c.composed_real,
        c.composed_absent,
        manifest.model_calls,
        manifest.network_calls
    );
    for r in results.iter().filter(|r| r.failure.is_some()) {
        eprintln!("claim {}: {}", r.claim_id, r.failure.as_deref().unwrap_or_default());
    }
    if c.failed_claims > 0 && !cfg.keep_going.unwrap_or(false) {
        return Err(anyhow!("{} claim(s) failed (use --keep-going to accept)", c.failed_claims));
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let results_path = cfg.results.clone().unwrap_or_else(|| cfg.out_dir().join("results.jsonl"));
    let results = read_results_jsonl(&results_path)
        .map_err(|e| invalid(format!("{}: {e}", results_path.display())))?;
    let labels = labels_from_claims(&claims_from(cfg)?);
    let golds = match &cfg.golds {
        Some(path) => load_gold_explanations(path).map_err(|e| {
            report_ingest_error("golds", &e);
            invalid(format!("gold explanations rejected: {e}"))
        })?,
        None => Vec::new(),
    };
    let embedder = cfg.embedding_backend()?;
    let fractions = cfg.subset_fractions.clone().unwrap_or_else(|| vec![1.0]);
    let mut reports = build_subset_reports(&results, &labels, &golds, embedder.as_ref(), &fractions, cfg.seed())
        .map_err(|e| match e {
            MetricsError::MissingLabel(_) | MetricsError::InvalidFraction(_) => invalid(e),
            other => anyhow!(other),
        })?;
    let manifest = results_path.with_file_name("manifest.json");
    if manifest.exists() {
        for r in &mut reports {
            r.manifest = Some(manifest.display().to_string());
        }
    }

    let dir = create_out_dir(cfg)?;
    write_json(&dir.join("report.json"), &reports)?;
    write_plot_csv(&dir.join("plot.csv"), &reports)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in &reports {
        println!(
            "subset {}: n={} acc_all={} acc_fake={} acc_real={} hit_element={} rouge_l={}",
            r.subset_fraction,
            r.n_total,
            fmt(r.acc_all),
            fmt(r.acc_fake),
            fmt(r.acc_real),
            fmt(r.hit_ratio_element),
            fmt(r.rouge_l)
        );
    }
    Ok(())
}
