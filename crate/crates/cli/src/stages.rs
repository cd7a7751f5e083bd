//! Stage implementations. Every stage reads its declared inputs (by default
//! the outputs of earlier stages under the output root), writes into its own
//! `<out>/<stage>/` directory and finishes with a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use encsynth_core::audit::{
    build_cipher_inventory, hallucination_report, leakage_report, PlaintextInventory,
};
use encsynth_core::backend::{
    BackendError, ChatBackend, Embedder, EmbeddingReranker, EmbeddingVector, HashEmbedder, MockChat, OpenAiChat,
    OpenAiConfig, OverlapReranker, Reranker,
};
use encsynth_core::corpus::{ingest, persist, read_jsonl, write_jsonl, Corpus, Document, IngestKind};
use encsynth_core::detcrypt::{parse_cipher_tokens, rewrite_decrypt, rewrite_encrypt, Canonicalizer, DetCipher, KeyMaterial};
use encsynth_core::graph::{
    build_graph, extract_entities, k_tuples, load_graph, pair_schedule_with, save_graph, score_pairs, EntityTuple,
};
use encsynth_core::pii::{export_review, import_review, EntitySpan, EntityType, PiiDetector, RecognizerSet, SpanMap};
use encsynth_core::prompt::PromptSet;
use encsynth_core::rag::{
    build_index, chunk_corpus, encrypt_item, load_mcq, run_eval, run_sweep, split_tokens, McqItem, RagBackends,
    RagConfig,
};
use encsynth_core::sidecar::{HttpSidecar, MockSidecar, SidecarClient, SidecarEmbedder, SidecarError, SidecarRequest, SidecarResponse, StdioSidecar};
use encsynth_core::synthesis::{filter_records, plan, records_to_corpus, run_plan, FilterRules, SynthRecord};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{stage_failure, stage_msg, CliError};
use crate::manifest::{write_json, RunInfo, StageRun, TOOL_VERSION};

/// Explicit input paths that replace the upstream defaults.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub corpus: Option<PathBuf>,
    pub spans: Option<PathBuf>,
    pub review: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub tuples: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    pub inventory: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub mcq: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub index_corpus: Option<PathBuf>,
    pub group_key: Option<String>,
}

struct SharedSidecar(Arc<dyn SidecarClient>);

impl SidecarClient for SharedSidecar {
    fn call(&self, request: &SidecarRequest) -> Result<SidecarResponse, SidecarError> {
        self.0.call(request)
    }
}

struct DynEmbedder(Arc<dyn Embedder>);

impl Embedder for DynEmbedder {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.0.embed(texts)
    }
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub info: RunInfo,
    pub prompts: PromptSet,
    sidecar: std::sync::OnceLock<Option<Arc<dyn SidecarClient>>>,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, config_base: PathBuf) -> Result<Self, CliError> {
        cfg.validate()?;
        let prompts = match &cfg.paths.prompts {
            Some(dir) => PromptSet::from_dir(dir).map_err(|e| CliError::config("paths.prompts", e))?,
            None => PromptSet::default(),
        };
        let info = RunInfo::new(
            cfg.paths.output.clone(),
            config_base.clone(),
            cfg.manifest_view(&config_base),
            prompts.version(),
        );
        Ok(Ctx {
            cfg,
            info,
            prompts,
            sidecar: std::sync::OnceLock::new(),
        })
    }

    fn upstream(&self, stage: &str, name: &str) -> PathBuf {
        self.info.out_root.join(stage).join(name)
    }

    pub fn canon(&self) -> Canonicalizer {
        Canonicalizer {
            casefold: self.cfg.crypto.casefold,
        }
    }

    pub fn cipher(&self) -> Result<DetCipher, CliError> {
        let key = KeyMaterial::from_file(self.cfg.key_file()?).map_err(|e| CliError::config("crypto.key_file", e))?;
        Ok(DetCipher::new(key, self.cfg.cipher_mode()?, self.canon()))
    }

    fn recognizers(&self) -> Result<RecognizerSet, CliError> {
        match &self.cfg.paths.recognizers {
            Some(p) => RecognizerSet::from_file(p).map_err(|e| CliError::config("paths.recognizers", e)),
            None => Ok(RecognizerSet::default_set()),
        }
    }

    fn sidecar(&self) -> Result<Option<Arc<dyn SidecarClient>>, CliError> {
        if let Some(s) = self.sidecar.get() {
            return Ok(s.clone());
        }
        let d = &self.cfg.detect;
        let client: Option<Arc<dyn SidecarClient>> = match d.sidecar.as_str() {
            "none" => None,
            "mock" => match &self.cfg.paths.gazetteer {
                Some(_) => {
                    let p = self.cfg.require("paths.gazetteer", &self.cfg.paths.gazetteer)?;
                    Some(Arc::new(MockSidecar::from_gazetteer_file(p).map_err(|e| CliError::config("paths.gazetteer", e))?))
                }
                None => {
                    tracing::warn!("mock sidecar without a gazetteer; only regex recognizers run");
                    None
                }
            },
            "stdio" => {
                let (prog, args) = d
                    .sidecar_command
                    .split_first()
                    .ok_or_else(|| CliError::config("detect.sidecar_command", "empty command"))?;
                Some(Arc::new(StdioSidecar::spawn(prog, args).map_err(|e| CliError::config("detect.sidecar_command", e))?))
            }
            "http" => {
                let url = d
                    .sidecar_url
                    .as_deref()
                    .ok_or_else(|| CliError::config("detect.sidecar_url", "not set"))?;
                Some(Arc::new(HttpSidecar::new(url, Duration::from_secs(d.sidecar_timeout_secs))))
            }
            other => return Err(CliError::config("detect.sidecar", format!("unknown sidecar {other}"))),
        };
        Ok(self.sidecar.get_or_init(|| client).clone())
    }

    pub fn detector(&self) -> Result<PiiDetector, CliError> {
        Ok(PiiDetector::new(self.recognizers()?, self.sidecar()?))
    }

    fn chat(&self, run: &mut StageRun<'_>) -> Result<Box<dyn ChatBackend>, CliError> {
        let b = &self.cfg.backend;
        match b.kind.as_str() {
            "mock" => Ok(Box::new(MockChat)),
            _ => {
                let base_url = b
                    .base_url
                    .clone()
                    .filter(|u| !u.is_empty())
                    .ok_or_else(|| CliError::config("backend.base_url", "not set"))?;
                let model = b
                    .model
                    .clone()
                    .filter(|m| !m.is_empty())
                    .ok_or_else(|| CliError::config("backend.model", "not set"))?;
                let api_key = b.api_key.clone().or_else(|| std::env::var("ENCSYNTH_API_KEY").ok());
                let client = OpenAiChat::new(
                    OpenAiConfig {
                        base_url,
                        model,
                        sampling: b.sampling.clone(),
                        max_retries: b.max_retries,
                        max_in_flight: b.max_in_flight,
                        per_minute: b.per_minute,
                        timeout_secs: b.timeout_secs,
                    },
                    api_key,
                );
                let client = if b.audit_log {
                    let p = run.output("backend_calls.jsonl");
                    client.with_audit_log(&p).map_err(|e| run.fail(e))?
                } else {
                    client
                };
                Ok(Box::new(client))
            }
        }
    }

    fn embedder(&self) -> Result<Arc<dyn Embedder>, CliError> {
        match self.cfg.backend.embedder.as_str() {
            "sidecar" => {
                let client = self
                    .sidecar()?
                    .ok_or_else(|| CliError::config("backend.embedder", "sidecar embedder needs a sidecar"))?;
                let emb = SidecarEmbedder::connect(SharedSidecar(client)).map_err(|e| CliError::config("backend.embedder", e))?;
                Ok(Arc::new(emb))
            }
            _ => Ok(Arc::new(HashEmbedder::default())),
        }
    }

    fn reranker(&self, embedder: &Arc<dyn Embedder>) -> Box<dyn Reranker> {
        match self.cfg.backend.reranker.as_str() {
            "embedding" => Box::new(EmbeddingReranker(DynEmbedder(embedder.clone()))),
            _ => Box::new(OverlapReranker),
        }
    }

    fn spans_default(&self) -> PathBuf {
        let reviewed = self.upstream("review", "spans.jsonl");
        if reviewed.exists() {
            reviewed
        } else {
            self.upstream("detect", "spans.jsonl")
        }
    }
}

fn need(stage: &str, p: PathBuf) -> Result<PathBuf, CliError> {
    if p.exists() {
        Ok(p)
    } else {
        Err(stage_msg(stage, format!("missing input {}", p.display())))
    }
}

fn load_corpus(stage: &str, p: &Path) -> Result<Corpus, CliError> {
    ingest(p, IngestKind::Jsonl).map_err(|e| stage_failure(stage, e))
}

fn load_spans(stage: &str, p: &Path) -> Result<SpanMap, CliError> {
    let list: Vec<EntitySpan> = read_jsonl(p).map_err(|e| stage_failure(stage, e))?;
    let mut map = SpanMap::new();
    for s in list {
        map.entry(s.doc_id.clone()).or_default().push(s);
    }
    Ok(map)
}

fn write_spans(run: &mut StageRun<'_>, name: &str, corpus: &Corpus, spans: &SpanMap) -> Result<(), CliError> {
    let flat: Vec<&EntitySpan> = corpus
        .documents()
        .iter()
        .flat_map(|d| spans.get(&d.doc_id).into_iter().flatten())
        .collect();
    let p = run.output(name);
    write_jsonl(&p, &flat).map_err(|e| stage_failure(run.stage, e))
}

fn type_counts<'a>(types: impl Iterator<Item = EntityType> + 'a) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in types {
        *out.entry(t.as_str().to_string()).or_insert(0) += 1;
    }
    out
}

pub fn detect(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let src = match &io.corpus {
        Some(p) => p.clone(),
        None => ctx.cfg.require("paths.corpus", &ctx.cfg.paths.corpus)?.to_path_buf(),
    };
    let kind = if ctx.cfg.paths.corpus_format == "dir" {
        IngestKind::PlainDir
    } else {
        IngestKind::Jsonl
    };
    let detector = ctx.detector()?;
    let mut run = StageRun::start(&ctx.info, "detect")?;
    let corpus = ingest(&run.input(&src), kind).map_err(|e| stage_failure("detect", e))?;
    if let Some(g) = &ctx.cfg.paths.gazetteer {
        if ctx.cfg.detect.sidecar == "mock" {
            run.input(g);
        }
    }
    if let Some(r) = &ctx.cfg.paths.recognizers {
        run.input(r);
    }
    let found = detector.detect_corpus(&corpus).map_err(|e| stage_failure("detect", e))?;
    persist(&corpus, &run.output("corpus.jsonl")).map_err(|e| stage_failure("detect", e))?;
    write_spans(&mut run, "spans.jsonl", &corpus, &found.spans)?;
    export_review(&corpus, &found.spans, &run.output("review.jsonl")).map_err(|e| stage_failure("detect", e))?;
    let inventory = PlaintextInventory::from_spans(&found.spans, ctx.canon());
    inventory.save(&run.output("inventory.jsonl")).map_err(|e| stage_failure("detect", e))?;
    let summary = json!({
        "documents": corpus.len(),
        "tokens": corpus.token_count(),
        "spans": found.spans.values().map(Vec::len).sum::<usize>(),
        "spans_per_type": type_counts(found.spans.values().flatten().map(|s| s.entity_type)),
        "dropped_sidecar_spans": found.dropped,
        "inventory_entries": inventory.entries.len(),
    });
    run.note("spans", &summary["spans"]);
    run.flag("sidecar", &ctx.cfg.detect.sidecar);
    run.write_json("summary.json", &summary)?;
    run.finish()
}

pub fn review(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let review_file = match &io.review {
        Some(p) => p.clone(),
        None => ctx.cfg.require("paths.review", &ctx.cfg.paths.review)?.to_path_buf(),
    };
    let corpus_path = need("review", io.corpus.clone().unwrap_or_else(|| ctx.upstream("detect", "corpus.jsonl")))?;
    let mut run = StageRun::start(&ctx.info, "review")?;
    let corpus = load_corpus("review", &run.input(&corpus_path))?;
    let spans = import_review(&run.input(&review_file), &corpus).map_err(|e| stage_failure("review", e))?;
    write_spans(&mut run, "spans.jsonl", &corpus, &spans)?;
    let inventory = PlaintextInventory::from_spans(&spans, ctx.canon());
    inventory.save(&run.output("inventory.jsonl")).map_err(|e| stage_failure("review", e))?;
    run.write_json(
        "summary.json",
        &json!({
            "spans": spans.values().map(Vec::len).sum::<usize>(),
            "spans_per_type": type_counts(spans.values().flatten().map(|s| s.entity_type)),
        }),
    )?;
    run.finish()
}

/// Replaces span surfaces that also occur in the title metadata.
fn encrypt_title(doc: &mut Document, spans: &[EntitySpan], cipher: &DetCipher) -> Result<(), CliError> {
    let Some(title) = doc.meta.get("title").cloned() else {
        return Ok(());
    };
    let mut surfaces: Vec<&EntitySpan> = spans.iter().collect();
    surfaces.sort_by(|a, b| b.surface.chars().count().cmp(&a.surface.chars().count()).then(a.surface.cmp(&b.surface)));
    surfaces.dedup_by(|a, b| a.surface == b.surface);
    let mut out = title;
    for s in surfaces {
        if s.surface.trim().is_empty() || !out.contains(&s.surface) {
            continue;
        }
        let tok = cipher
            .encrypt_entity(&s.surface, s.entity_type)
            .map_err(|e| stage_failure("encrypt", e))?;
        out = out.replace(&s.surface, &tok.render());
    }
    doc.meta.insert("title".into(), out);
    Ok(())
}

fn encrypt_corpus(
    stage: &str,
    corpus: &Corpus,
    spans: &SpanMap,
    types: &BTreeSet<EntityType>,
    cipher: &DetCipher,
) -> Result<(Corpus, SpanMap, BTreeMap<String, usize>), CliError> {
    let mut docs = Vec::with_capacity(corpus.len());
    let mut kept = SpanMap::new();
    let mut counts = BTreeMap::new();
    for doc in corpus.documents() {
        let doc_spans: Vec<EntitySpan> = spans
            .get(&doc.doc_id)
            .map(|v| v.iter().filter(|s| types.contains(&s.entity_type)).cloned().collect())
            .unwrap_or_default();
        let (mut enc, tokens) = rewrite_encrypt(doc, &doc_spans, cipher).map_err(|e| stage_failure(stage, e))?;
        encrypt_title(&mut enc, &doc_spans, cipher)?;
        for t in tokens {
            *counts.entry(t.entity_type.as_str().to_string()).or_insert(0) += 1;
        }
        if !doc_spans.is_empty() {
            kept.insert(doc.doc_id.clone(), doc_spans);
        }
        docs.push(enc);
    }
    Ok((Corpus::new(docs).map_err(|e| stage_failure(stage, e))?, kept, counts))
}

pub fn encrypt(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let cipher = ctx.cipher()?;
    let types = ctx.cfg.encrypt_types()?;
    let corpus_path = need("encrypt", io.corpus.clone().unwrap_or_else(|| ctx.upstream("detect", "corpus.jsonl")))?;
    let spans_path = need("encrypt", io.spans.clone().unwrap_or_else(|| ctx.spans_default()))?;
    let mut run = StageRun::start(&ctx.info, "encrypt")?;
    let corpus = load_corpus("encrypt", &run.input(&corpus_path))?;
    let spans = load_spans("encrypt", &run.input(&spans_path))?;
    let (enc, kept, counts) = encrypt_corpus("encrypt", &corpus, &spans, &types, &cipher)?;
    persist(&enc, &run.output("corpus.jsonl")).map_err(|e| stage_failure("encrypt", e))?;
    PlaintextInventory::from_spans(&kept, ctx.canon())
        .save(&run.output("inventory.jsonl"))
        .map_err(|e| stage_failure("encrypt", e))?;
    run.flag("mode", cipher.mode().to_string());
    run.flag("encrypt_types", types.iter().map(|t| t.as_str()).collect::<Vec<_>>());
    run.flag("canonical_casefold", ctx.cfg.crypto.casefold);
    run.write_json(
        "summary.json",
        &json!({
            "key_id": cipher.key().key_id(),
            "mode": cipher.mode().to_string(),
            "documents": enc.len(),
            "tokens": counts.values().sum::<usize>(),
            "tokens_per_type": counts,
        }),
    )?;
    run.finish()
}

fn graph_inputs(ctx: &Ctx, io: &Inputs, stage: &str) -> Result<(PathBuf, Option<PathBuf>), CliError> {
    if ctx.cfg.enc_first() {
        let corpus = need(stage, io.corpus.clone().unwrap_or_else(|| ctx.upstream("encrypt", "corpus.jsonl")))?;
        Ok((corpus, io.spans.clone()))
    } else {
        let corpus = need(stage, io.corpus.clone().unwrap_or_else(|| ctx.upstream("detect", "corpus.jsonl")))?;
        let spans = need(stage, io.spans.clone().unwrap_or_else(|| ctx.spans_default()))?;
        Ok((corpus, Some(spans)))
    }
}

pub fn graph(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let (corpus_path, spans_path) = graph_inputs(ctx, io, "graph")?;
    let g = &ctx.cfg.graph;
    let mut run = StageRun::start(&ctx.info, "graph")?;
    let llm = ctx.chat(&mut run)?;
    let corpus = load_corpus("graph", &run.input(&corpus_path))?;
    let spans = match &spans_path {
        Some(p) => load_spans("graph", &run.input(p))?,
        None => SpanMap::new(),
    };
    let nodes = extract_entities(&corpus, &spans, g.llm_extract.then_some(llm.as_ref()), &ctx.prompts)
        .map_err(|e| stage_failure("graph", e))?;
    let pairs = pair_schedule_with(&nodes, g.pair_budget, g.shared_doc_only);
    let edges = score_pairs(&pairs, &nodes, &corpus, llm.as_ref(), &ctx.prompts).map_err(|e| stage_failure("graph", e))?;
    let graph = build_graph(nodes, edges, g.threshold).map_err(|e| stage_failure("graph", e))?;
    save_graph(&graph, &run.output("graph.jsonl")).map_err(|e| stage_failure("graph", e))?;
    run.flag("threshold", g.threshold);
    run.flag("pair_budget", g.pair_budget);
    run.flag("shared_doc_only", g.shared_doc_only);
    run.flag("synthesis_mode", &ctx.cfg.synthesis.mode);
    run.write_json(
        "summary.json",
        &json!({
            "nodes": graph.n,
            "scored_pairs": pairs.len(),
            "edges": graph.edges.len(),
            "pruned": graph.pruned,
            "threshold": graph.threshold,
        }),
    )?;
    run.finish()
}

pub fn tuples(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let graph_path = need("tuples", io.graph.clone().unwrap_or_else(|| ctx.upstream("graph", "graph.jsonl")))?;
    let g = &ctx.cfg.graph;
    let mut run = StageRun::start(&ctx.info, "tuples")?;
    let graph = load_graph(&run.input(&graph_path)).map_err(|e| stage_failure("tuples", e))?;
    if graph.n < 2 {
        return Err(run.fail(format!("graph has {} node(s); tuples need at least 2", graph.n)));
    }
    let k_hi = g.k_max.min(graph.n);
    let mut all: Vec<EntityTuple> = Vec::new();
    let mut per_k = Vec::new();
    for k in 2..=k_hi {
        let set = k_tuples(&graph, k).map_err(|e| stage_failure("tuples", e))?;
        per_k.push(json!({
            "k": k,
            "tuples": set.tuples.len(),
            "skipped_centers": set.skipped,
            "duplicates": set.duplicates,
        }));
        all.extend(set.tuples);
    }
    let total = all.len();
    if let Some(cap) = g.max_tuples {
        all.truncate(cap);
    }
    write_jsonl(&run.output("tuples.jsonl"), &all).map_err(|e| stage_failure("tuples", e))?;
    run.flag("k_max", g.k_max);
    run.flag("k_effective", k_hi);
    run.flag("max_tuples", g.max_tuples);
    run.write_json("summary.json", &json!({"per_k": per_k, "generated": total, "kept": all.len()}))?;
    run.finish()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRulesFile {
    min_length: Option<usize>,
    question_delimiter: Option<String>,
    answer_delimiter: Option<String>,
    inventory: Option<PathBuf>,
    casefold: Option<bool>,
}

fn filter_rules(ctx: &Ctx, run: &mut StageRun<'_>, default_inventory: Option<PathBuf>) -> Result<FilterRules, CliError> {
    let mut rules = FilterRules {
        casefold: ctx.cfg.crypto.casefold,
        ..FilterRules::default()
    };
    let mut inventory = default_inventory;
    if let Some(p) = &ctx.cfg.paths.filter_rules {
        let text = std::fs::read_to_string(run.input(p)).map_err(|e| CliError::config("paths.filter_rules", e))?;
        let file: FilterRulesFile = serde_json::from_str(&text).map_err(|e| CliError::config("paths.filter_rules", e))?;
        if let Some(v) = file.min_length {
            rules.min_length = v;
        }
        if let Some(v) = file.question_delimiter {
            rules.question_delimiter = v;
        }
        if let Some(v) = file.answer_delimiter {
            rules.answer_delimiter = v;
        }
        if let Some(v) = file.casefold {
            rules.casefold = v;
        }
        if let Some(inv) = file.inventory {
            let base = p.parent().unwrap_or(Path::new(""));
            inventory = Some(if inv.is_relative() { base.join(inv) } else { inv });
        }
    }
    if let Some(inv) = inventory {
        if inv.exists() {
            rules.inventory = PlaintextInventory::load(&run.input(&inv)).map_err(|e| stage_failure(run.stage, e))?;
        }
    }
    Ok(rules)
}

pub fn synth(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let kind = ctx.cfg.synth_kind()?;
    let s = &ctx.cfg.synthesis;
    let enc_first = ctx.cfg.enc_first();
    let cipher = if enc_first { None } else { Some(ctx.cipher()?) };
    let detector = if enc_first { None } else { Some(ctx.detector()?) };
    let tuples_path = need("synth", io.tuples.clone().unwrap_or_else(|| ctx.upstream("tuples", "tuples.jsonl")))?;
    let graph_path = need("synth", io.graph.clone().unwrap_or_else(|| ctx.upstream("graph", "graph.jsonl")))?;
    let (corpus_path, _) = graph_inputs(ctx, io, "synth")?;
    let mut run = StageRun::start(&ctx.info, "synth")?;
    let llm = ctx.chat(&mut run)?;
    let tuples: Vec<EntityTuple> = read_jsonl(&run.input(&tuples_path)).map_err(|e| stage_failure("synth", e))?;
    let graph = load_graph(&run.input(&graph_path)).map_err(|e| stage_failure("synth", e))?;
    let corpus = load_corpus("synth", &run.input(&corpus_path))?;
    let the_plan = plan(s.budget_tokens, tuples, s.avg_record_tokens).map_err(|e| stage_failure("synth", e))?;
    let records = run_plan(&the_plan, &graph, &corpus, kind, llm.as_ref(), &ctx.prompts, &ctx.cfg.backend.sampling)
        .map_err(|e| stage_failure("synth", e))?;
    // before encryption the records legitimately contain plaintext
    let default_inventory = enc_first.then(|| ctx.upstream("encrypt", "inventory.jsonl"));
    let mut rules = filter_rules(ctx, &mut run, default_inventory)?;
    if !enc_first {
        rules.inventory = PlaintextInventory::default();
    }
    let n_records = records.len();
    let (kept, rejected) = filter_records(records, &rules);
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rejected {
        *reasons.entry(r.reject_reason.clone().unwrap_or_default()).or_insert(0) += 1;
    }
    let mut all: Vec<&SynthRecord> = kept.iter().chain(&rejected).collect();
    all.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    write_jsonl(&run.output("records.jsonl"), &all).map_err(|e| stage_failure("synth", e))?;
    let synthetic = records_to_corpus(&kept).map_err(|e| stage_failure("synth", e))?;
    let mut tokens_added = BTreeMap::new();
    let synthetic = match (cipher, detector) {
        (Some(cipher), Some(detector)) => {
            let found = detector.detect_corpus(&synthetic).map_err(|e| stage_failure("synth", e))?;
            let (enc, _, counts) = encrypt_corpus("synth", &synthetic, &found.spans, &ctx.cfg.encrypt_types()?, &cipher)?;
            tokens_added = counts;
            enc
        }
        _ => synthetic,
    };
    persist(&synthetic, &run.output("corpus.jsonl")).map_err(|e| stage_failure("synth", e))?;
    run.flag("kind", kind.as_str());
    run.flag("mode", &s.mode);
    run.flag("budget_tokens", s.budget_tokens);
    run.flag("avg_record_tokens", s.avg_record_tokens);
    run.note("accepted", kept.len());
    run.write_json(
        "summary.json",
        &json!({
            "tuples": the_plan.tuples.len(),
            "per_tuple_records": the_plan.per_tuple_records,
            "records": n_records,
            "accepted": kept.len(),
            "rejected": rejected.len(),
            "reject_reasons": reasons,
            "synthetic_tokens": synthetic.token_count(),
            "encrypted_after_synthesis": tokens_added,
        }),
    )?;
    run.finish()
}

pub fn decrypt(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let cipher = ctx.cipher()?;
    let input = need("decrypt", io.input.clone().unwrap_or_else(|| ctx.upstream("synth", "corpus.jsonl")))?;
    let mut run = StageRun::start(&ctx.info, "decrypt")?;
    let corpus = load_corpus("decrypt", &run.input(&input))?;
    let mut docs = Vec::with_capacity(corpus.len());
    let mut sites = Vec::new();
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus.documents() {
        let (text, found) = rewrite_decrypt(&doc.text, &cipher);
        for s in found {
            let status = serde_json::to_value(s.outcome.status).unwrap_or_default();
            *statuses.entry(status.as_str().unwrap_or("").to_string()).or_insert(0) += 1;
            sites.push(json!({
                "doc_id": doc.doc_id,
                "rendering": s.rendering,
                "start": s.start,
                "end": s.end,
                "status": status,
                "note": s.outcome.note,
            }));
        }
        let mut d = doc.clone();
        d.text = text;
        docs.push(d);
    }
    let out = Corpus::new(docs).map_err(|e| stage_failure("decrypt", e))?;
    persist(&out, &run.output("corpus.jsonl")).map_err(|e| stage_failure("decrypt", e))?;
    write_jsonl(&run.output("sites.jsonl"), &sites).map_err(|e| stage_failure("decrypt", e))?;
    run.flag("mode", cipher.mode().to_string());
    run.write_json("summary.json", &json!({"documents": out.len(), "tokens": sites.len(), "statuses": statuses}))?;
    run.finish()
}

pub fn audit_leakage(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let stage = "audit-leakage";
    let synthetic = need(stage, io.synthetic.clone().unwrap_or_else(|| ctx.upstream("synth", "corpus.jsonl")))?;
    let inventory = need(stage, io.inventory.clone().unwrap_or_else(|| ctx.upstream("encrypt", "inventory.jsonl")))?;
    let recognizers = ctx.recognizers()?;
    let mut run = StageRun::start(&ctx.info, stage)?;
    let corpus = load_corpus(stage, &run.input(&synthetic))?;
    let inv = PlaintextInventory::load(&run.input(&inventory)).map_err(|e| stage_failure(stage, e))?;
    let report = leakage_report(&corpus, &inv, ctx.canon(), Some(&recognizers)).map_err(|e| stage_failure(stage, e))?;
    run.note("total", &report.total_display);
    run.flag("canonical_casefold", ctx.cfg.crypto.casefold);
    run.write_json("report.json", &report)?;
    run.finish()
}

pub fn audit_hallucination(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let stage = "audit-hallucination";
    let cipher = ctx.cipher()?;
    let responses = match &io.responses {
        Some(p) => p.clone(),
        None => ctx.cfg.require("paths.responses", &ctx.cfg.paths.responses)?.to_path_buf(),
    };
    let group_key = io.group_key.clone().unwrap_or_else(|| "article_id".into());
    let synthetic = need(stage, io.synthetic.clone().unwrap_or_else(|| ctx.upstream("synth", "corpus.jsonl")))?;
    let mut run = StageRun::start(&ctx.info, stage)?;
    let corpus = load_corpus(stage, &run.input(&synthetic))?;
    let inventory = build_cipher_inventory(&corpus, &group_key).map_err(|e| stage_failure(stage, e))?;
    let raw: Vec<Value> = read_jsonl(&run.input(&responses)).map_err(|e| stage_failure(stage, e))?;
    let pairs = raw
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let article = v
                .get(&group_key)
                .or_else(|| v.get("article_id"))
                .and_then(Value::as_str)
                .ok_or_else(|| stage_msg(stage, format!("response {} has no {group_key}", i + 1)))?;
            let text = v
                .get("response")
                .or_else(|| v.get("text"))
                .and_then(Value::as_str)
                .ok_or_else(|| stage_msg(stage, format!("response {} has no response text", i + 1)))?;
            Ok((article.to_string(), text.to_string()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = hallucination_report(&pairs, &inventory, &cipher).map_err(|e| stage_failure(stage, e))?;
    run.flag("group_key", &group_key);
    run.flag("mode", cipher.mode().to_string());
    run.note("unique_ratio", report.unique_ratio);
    run.write_json("report.json", &report)?;
    run.finish()
}

pub fn rag_eval(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    let stage = "rag-eval";
    let r = &ctx.cfg.rag;
    let mcq = match &io.mcq {
        Some(p) => p.clone(),
        None => ctx.cfg.require("paths.mcq", &ctx.cfg.paths.mcq)?.to_path_buf(),
    };
    let index_path = need(
        stage,
        io.index_corpus.clone().unwrap_or_else(|| match r.index.as_str() {
            "synthetic" => ctx.upstream("synth", "corpus.jsonl"),
            "original" => ctx.upstream("detect", "corpus.jsonl"),
            _ => ctx.upstream("encrypt", "corpus.jsonl"),
        }),
    )?;
    let items = load_mcq(&mcq).map_err(|e| stage_failure(stage, e))?;
    let needs_crypto = items.iter().any(|i| i.encrypted);
    let crypto = if needs_crypto {
        Some((ctx.cipher()?, ctx.detector()?, ctx.cfg.question_types()?))
    } else {
        None
    };
    let embedder = ctx.embedder()?;
    let reranker = ctx.reranker(&embedder);
    let mut run = StageRun::start(&ctx.info, stage)?;
    run.input(&mcq);
    let llm = ctx.chat(&mut run)?;
    let corpus = load_corpus(stage, &run.input(&index_path))?;
    let items: Vec<McqItem> = items
        .iter()
        .map(|it| match (&crypto, it.encrypted) {
            (Some((cipher, det, types)), true) => encrypt_item(it, det, cipher, types).map_err(|e| stage_failure(stage, e)),
            _ => Ok(it.clone()),
        })
        .collect::<Result<_, _>>()?;
    write_jsonl(&run.output("items.jsonl"), &items).map_err(|e| stage_failure(stage, e))?;
    let cfg = RagConfig {
        chunk_size: r.chunk_size,
        top_k: r.top_k,
        retrieve_k: r.retrieve_k.unwrap_or(4 * r.top_k),
    };
    let chunks = chunk_corpus(&corpus, cfg.chunk_size).map_err(|e| stage_failure(stage, e))?;
    let split: Vec<String> = corpus.documents().iter().flat_map(|d| split_tokens(d, &chunks)).collect();
    if !split.is_empty() {
        return Err(run.fail(format!("{} token renderings split across chunks", split.len())));
    }
    write_jsonl(&run.output("chunks.jsonl"), &chunks).map_err(|e| stage_failure(stage, e))?;
    let index = build_index(chunks, embedder.as_ref()).map_err(|e| stage_failure(stage, e))?;
    let backends = RagBackends {
        embedder: embedder.as_ref(),
        reranker: reranker.as_ref(),
        llm: llm.as_ref(),
    };
    let result = run_eval(&items, &index, &cfg, &backends, &ctx.prompts).map_err(|e| stage_failure(stage, e))?;
    run.write_json("results.json", &result)?;
    run.note("accuracy", result.accuracy);
    run.note("format_failures", result.n_format_failures);
    run.flag("chunk_size", cfg.chunk_size);
    run.flag("top_k", cfg.top_k);
    run.flag("retrieve_k", cfg.retrieve_k);
    run.flag("sweep", r.sweep);
    run.flag("index", &r.index);
    if r.sweep {
        let (cells, details) = run_sweep(&items, &corpus, &r.sweep_chunk_sizes, &r.sweep_top_ks, &backends, &ctx.prompts)
            .map_err(|e| stage_failure(stage, e))?;
        let failure_report: Vec<Value> = cells
            .iter()
            .map(|c| {
                json!({
                    "chunk_size": c.chunk_size,
                    "top_k": c.top_k,
                    "format_failures": c.n_format_failures,
                    "backend_failures": c.n_backend_failures,
                })
            })
            .collect();
        run.write_json("sweep.json", &json!({"cells": cells, "failure_report": failure_report}))?;
        run.write_json("sweep_details.json", &details)?;
    }
    run.finish()
}

pub const STAGES: [&str; 11] = [
    "detect",
    "review",
    "encrypt",
    "graph",
    "tuples",
    "synth",
    "decrypt",
    "audit-leakage",
    "audit-hallucination",
    "rag-eval",
    "pipeline",
];

/// Runs the stages in order. Review, the hallucination audit and the RAG
/// evaluation run only when their inputs are configured.
type StageFn = fn(&Ctx, &Inputs) -> Result<PathBuf, CliError>;

pub fn pipeline(ctx: &Ctx, io: &Inputs) -> Result<PathBuf, CliError> {
    ctx.cfg.key_file()?;
    ctx.cfg.require("paths.corpus", &ctx.cfg.paths.corpus)?;
    std::fs::create_dir_all(&ctx.info.out_root).map_err(|e| stage_msg("pipeline", e))?;
    let mut done: Vec<(String, PathBuf)> = Vec::new();
    let mut skipped: Vec<&str> = Vec::new();
    let base = Inputs {
        group_key: io.group_key.clone(),
        ..Inputs::default()
    };
    let steps: [(&str, StageFn, bool); 10] = [
        ("detect", detect, true),
        ("review", review, ctx.cfg.paths.review.is_some()),
        ("encrypt", encrypt, true),
        ("graph", graph, true),
        ("tuples", tuples, true),
        ("synth", synth, true),
        ("decrypt", decrypt, true),
        ("audit-leakage", audit_leakage, true),
        ("audit-hallucination", audit_hallucination, ctx.cfg.paths.responses.is_some()),
        ("rag-eval", rag_eval, ctx.cfg.paths.mcq.is_some()),
    ];
    for (name, f, enabled) in steps {
        if !enabled {
            skipped.push(name);
            continue;
        }
        tracing::info!(stage = name, "running");
        let stage_io = if name == "detect" {
            Inputs {
                corpus: io.corpus.clone(),
                ..base.clone()
            }
        } else {
            base.clone()
        };
        done.push((name.to_string(), f(ctx, &stage_io)?));
    }
    let stages: Vec<Value> = done
        .iter()
        .map(|(name, m)| {
            let digest = crate::manifest::sha256_path(m).unwrap_or_default();
            json!({"stage": name, "manifest": ctx.info.display_path(m), "sha256": digest})
        })
        .collect();
    let manifest = json!({
        "tool": "encsynth",
        "version": TOOL_VERSION,
        "stage": "pipeline",
        "prompt_version": ctx.info.prompt_version,
        "config_sha256": ctx.info.config_sha256,
        "config": ctx.info.config,
        "stages": stages,
        "skipped": skipped,
    });
    let path = ctx.info.out_root.join("manifest.json");
    write_json(&path, &manifest).map_err(|e| stage_msg("pipeline", e))?;
    Ok(path)
}

/// Token renderings in a corpus, used by tests and summaries.
pub fn count_tokens(corpus: &Corpus) -> usize {
    corpus.documents().iter().map(|d| parse_cipher_tokens(&d.text).len()).sum()
}
