//! Retrieval-augmented multiple-choice evaluation.
//!
//! Chunks are cut only where the approximate token count is additive: after
//! whitespace and around CJK characters. A cipher-token rendering contains
//! neither, so no cut can fall inside one.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest, Embedder, EmbeddingVector, Reranker};
use crate::corpus::{approx_tokens, is_cjk, read_jsonl, Corpus, CorpusError, Document};
use crate::detcrypt::{rewrite_encrypt, CryptoError, DetCipher};
use crate::pii::{EntityType, PiiDetector, PiiError};
use crate::prompt::{self, PromptSet};

pub const MIN_CHUNK_SIZE: usize = 16;
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("chunk size {0} is below the minimum of 16")]
    ChunkSizeTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid item {id}: {detail}")]
    InvalidItem { id: String, detail: String },
    #[error("no evaluation items")]
    EmptyItems,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pii(#[from] PiiError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub approx_token_len: usize,
}

/// Splits `text` after each match of a separator, keeping separators with
/// the preceding piece.
fn split_after(text: &str, base: usize, re: &Regex) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in re.find_iter(text) {
        if m.end() > start && m.end() < text.len() {
            out.push(base + start..base + m.end());
            start = m.end();
        }
    }
    if start < text.len() {
        out.push(base + start..base + text.len());
    }
    out
}

fn paragraph_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t\r]*\n\s*").expect("paragraph regex"))
}

fn sentence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?:[.!?]["')\]]*\s+|[。！？][”’」』）]*\s*)"#).expect("sentence regex")
    })
}

/// Word-level pieces: a non-CJK run or a single CJK character, each with its
/// trailing whitespace.
fn atoms(text: &str, base: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut open = false;
    for (i, c) in text.char_indices() {
        let end = i + c.len_utf8();
        if c.is_whitespace() {
            match out.last_mut() {
                Some(r) => r.end = base + end,
                None => out.push(base + i..base + end),
            }
            open = false;
        } else if is_cjk(c) {
            out.push(base + i..base + end);
            open = false;
        } else if open {
            out.last_mut().expect("open run").end = base + end;
        } else {
            out.push(base + i..base + end);
            open = true;
        }
    }
    out
}

fn units(text: &str, size: usize) -> Vec<(Range<usize>, usize)> {
    let mut out = Vec::new();
    for p in split_after(text, 0, paragraph_re()) {
        let w = approx_tokens(&text[p.clone()]);
        if w <= size {
            out.push((p, w));
            continue;
        }
        for s in split_after(&text[p.clone()], p.start, sentence_re()) {
            let w = approx_tokens(&text[s.clone()]);
            if w <= size {
                out.push((s, w));
            } else {
                out.extend(
                    atoms(&text[s.clone()], s.start)
                        .into_iter()
                        .map(|a| {
                            let w = approx_tokens(&text[a.clone()]);
                            (a, w)
                        }),
                );
            }
        }
    }
    out
}

pub fn chunk_document(doc: &Document, size: usize) -> Result<Vec<Chunk>, RagError> {
    if size < MIN_CHUNK_SIZE {
        return Err(RagError::ChunkSizeTooSmall(size));
    }
    let text = &doc.text;
    let mut ranges: Vec<Range<usize>> = Vec::new();
    let mut current: Option<(Range<usize>, usize)> = None;
    for (r, w) in units(text, size) {
        current = match current {
            Some((cr, cw)) if cw + w <= size => Some((cr.start..r.end, cw + w)),
            Some((cr, _)) => {
                ranges.push(cr);
                Some((r, w))
            }
            None => Some((r, w)),
        };
    }
    if let Some((cr, _)) = current {
        ranges.push(cr);
    }
    Ok(ranges
        .into_iter()
        .map(|r| text[r].trim())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| Chunk {
            chunk_id: format!("{}#{i}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            text: t.to_string(),
            approx_token_len: approx_tokens(t),
        })
        .collect())
}

pub fn chunk_corpus(corpus: &Corpus, size: usize) -> Result<Vec<Chunk>, RagError> {
    let per_doc: Vec<Vec<Chunk>> = corpus
        .documents()
        .iter()
        .map(|d| chunk_document(d, size))
        .collect::<Result<_, _>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Exact cosine-similarity index.
pub struct VectorIndex {
    dim: usize,
    chunks: Vec<Chunk>,
    vectors: Vec<EmbeddingVector>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// `(chunk index, cosine)` for the best `k` chunks; ties keep index order.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(usize, f64)>, RagError> {
        if query.dim() != self.dim {
            return Err(BackendError::DimMismatch {
                expected: self.dim,
                got: query.dim(),
            }
            .into());
        }
        let mut scored: Vec<(usize, f64)> = self.vectors.iter().map(|v| query.cosine(v)).enumerate().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored)
    }
}

pub fn build_index(chunks: Vec<Chunk>, embedder: &dyn Embedder) -> Result<VectorIndex, RagError> {
    let dim = embedder.dim();
    let mut vectors = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        let got = embedder.embed(&texts)?;
        if got.len() != texts.len() {
            return Err(BackendError::Protocol(format!("{} vectors for {} texts", got.len(), texts.len())).into());
        }
        for v in got {
            if v.dim() != dim {
                return Err(BackendError::DimMismatch { expected: dim, got: v.dim() }.into());
            }
            vectors.push(v);
        }
    }
    Ok(VectorIndex { dim, chunks, vectors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagConfig {
    pub chunk_size: usize,
    pub top_k: usize,
    pub retrieve_k: usize,
}

impl RagConfig {
    /// `retrieve_k` defaults to four times `top_k`.
    pub fn new(chunk_size: usize, top_k: usize) -> Self {
        RagConfig {
            chunk_size,
            top_k,
            retrieve_k: 4 * top_k,
        }
    }

    pub fn validate(&self) -> Result<(), RagError> {
        if self.chunk_size < MIN_CHUNK_SIZE {
            return Err(RagError::ChunkSizeTooSmall(self.chunk_size));
        }
        if self.top_k == 0 || self.top_k > self.retrieve_k {
            return Err(RagError::InvalidConfig(format!(
                "need 1 <= top_k ({}) <= retrieve_k ({})",
                self.top_k, self.retrieve_k
            )));
        }
        Ok(())
    }
}

/// Cosine pre-selection of `retrieve_k` chunks, then reranking to `top_k`.
pub fn retrieve(
    question: &str,
    index: &VectorIndex,
    cfg: &RagConfig,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
) -> Result<Vec<Chunk>, RagError> {
    cfg.validate()?;
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.embed(&[question.to_string()])?.remove(0);
    let pool = index.search(&q, cfg.retrieve_k)?;
    let texts: Vec<String> = pool.iter().map(|(i, _)| index.chunks[*i].text.clone()).collect();
    let ranked = reranker.rerank(question, &texts, cfg.top_k)?;
    Ok(ranked.into_iter().map(|(j, _)| index.chunks[pool[j].0].clone()).collect())
}

pub const LABELS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: String,
    #[serde(default)]
    pub encrypted: bool,
}

impl McqItem {
    pub fn validate(&self) -> Result<char, RagError> {
        let bad = |detail: &str| RagError::InvalidItem {
            id: self.id.clone(),
            detail: detail.to_string(),
        };
        if self.options.len() != 4 {
            return Err(bad("expected exactly 4 options"));
        }
        let mut chars = self.gold.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if LABELS.contains(&c.to_ascii_uppercase()) => Ok(c.to_ascii_uppercase()),
            _ => Err(bad("gold must be one of A, B, C, D")),
        }
    }
}

/// Reads an MCQ JSONL file; items without an id get `q<line index>`.
pub fn load_mcq(path: &Path) -> Result<Vec<McqItem>, RagError> {
    let mut items: Vec<McqItem> = read_jsonl(path)?;
    for (i, item) in items.iter_mut().enumerate() {
        if item.id.is_empty() {
            item.id = format!("q{i}");
        }
        item.validate()?;
    }
    Ok(items)
}

/// Encrypts detected PII of the listed types in the question and options.
pub fn encrypt_item(
    item: &McqItem,
    detector: &PiiDetector,
    cipher: &DetCipher,
    types: &BTreeSet<EntityType>,
) -> Result<McqItem, RagError> {
    let enc = |field: &str, text: &str| -> Result<String, RagError> {
        let doc = Document::original(format!("{}:{field}", item.id), text);
        let spans: Vec<_> = detector
            .detect(&doc)?
            .spans
            .into_iter()
            .filter(|s| types.contains(&s.entity_type))
            .collect();
        Ok(rewrite_encrypt(&doc, &spans, cipher)?.0.text)
    };
    Ok(McqItem {
        id: item.id.clone(),
        question: enc("q", &item.question)?,
        options: item
            .options
            .iter()
            .enumerate()
            .map(|(i, o)| enc(&format!("o{i}"), o))
            .collect::<Result<_, _>>()?,
        gold: item.gold.clone(),
        encrypted: true,
    })
}

fn answer_res() -> &'static [Regex; 4] {
    static RES: OnceLock<[Regex; 4]> = OnceLock::new();
    RES.get_or_init(|| {
        [
            Regex::new(r"^\s*[*_`]*([A-D])[*_`]*\s*[.)]?\s*$").expect("bare"),
            Regex::new(r"^\s*[*_`]*([A-D])[*_`]*[.)](?:\s|$)").expect("leading"),
            Regex::new(r"\(([A-D])\)").expect("paren"),
            Regex::new(r"(?i:answer)(?:\s+is)?\s*[:：]?\s*[*_`]*\(?([A-D])\b").expect("answer"),
        ]
    })
}

/// Accepts a bare letter, `X.` / `X)` at the start, `(X)`, or `Answer: X`.
/// When several forms match, the earliest position wins.
pub fn parse_answer(response: &str) -> Option<char> {
    answer_res()
        .iter()
        .filter_map(|re| re.captures(response))
        .map(|c| c.get(1).expect("label group"))
        .min_by_key(|m| m.start())
        .and_then(|m| m.as_str().chars().next())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Answer {
    Label { label: char },
    FormatFailure { raw: String },
}

pub fn mcq_prompt(item: &McqItem, context: &[Chunk], prompts: &PromptSet) -> String {
    let ctx = context
        .iter()
        .map(|c| prompt::compact(&c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let options = item
        .options
        .iter()
        .zip(LABELS)
        .map(|(o, l)| format!("{l}. {o}"))
        .collect::<Vec<_>>()
        .join("\n");
    prompt::render(
        &prompts.mcq,
        &[("context", &ctx), ("question", &item.question), ("options", &options)],
    )
}

pub fn answer_mcq(
    item: &McqItem,
    context: &[Chunk],
    llm: &dyn ChatBackend,
    prompts: &PromptSet,
) -> Result<Answer, BackendError> {
    let req = ChatRequest::user(format!("mcq:{}", item.id), mcq_prompt(item, context, prompts));
    let raw = llm.chat(&req)?;
    Ok(match parse_answer(&raw) {
        Some(label) => Answer::Label { label },
        None => Answer::FormatFailure { raw },
    })
}

pub struct RagBackends<'a> {
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub llm: &'a dyn ChatBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub gold: char,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<char>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format_failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config: RagConfig,
    pub accuracy: f64,
    pub n_items: usize,
    pub n_correct: usize,
    pub n_format_failures: usize,
    pub n_backend_failures: usize,
    pub items: Vec<ItemResult>,
}

/// Retrieval, answering and scoring for every item. Format failures and
/// backend errors both score as incorrect and are counted separately.
pub fn run_eval(
    items: &[McqItem],
    index: &VectorIndex,
    cfg: &RagConfig,
    backends: &RagBackends<'_>,
    prompts: &PromptSet,
) -> Result<EvalResult, RagError> {
    if items.is_empty() {
        return Err(RagError::EmptyItems);
    }
    cfg.validate()?;
    let golds: Vec<char> = items.iter().map(McqItem::validate).collect::<Result<_, _>>()?;
    let results: Vec<ItemResult> = items
        .par_iter()
        .zip(golds)
        .map(|(item, gold)| {
            let mut r = ItemResult {
                id: item.id.clone(),
                gold,
                chosen: None,
                correct: false,
                format_failure: None,
                backend_error: None,
                retrieved: Vec::new(),
            };
            let ctx = match retrieve(&item.question, index, cfg, backends.embedder, backends.reranker) {
                Ok(c) => c,
                Err(e) => {
                    r.backend_error = Some(e.to_string());
                    return r;
                }
            };
            r.retrieved = ctx.iter().map(|c| c.chunk_id.clone()).collect();
            match answer_mcq(item, &ctx, backends.llm, prompts) {
                Ok(Answer::Label { label }) => {
                    r.chosen = Some(label);
                    r.correct = label == gold;
                }
                Ok(Answer::FormatFailure { raw }) => r.format_failure = Some(raw),
                Err(e) => r.backend_error = Some(e.to_string()),
            }
            r
        })
        .collect();
    let n_correct = results.iter().filter(|r| r.correct).count();
    Ok(EvalResult {
        config: *cfg,
        accuracy: n_correct as f64 / results.len() as f64,
        n_items: results.len(),
        n_correct,
        n_format_failures: results.iter().filter(|r| r.format_failure.is_some()).count(),
        n_backend_failures: results.iter().filter(|r| r.backend_error.is_some()).count(),
        items: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub chunk_size: usize,
    pub top_k: usize,
    pub retrieve_k: usize,
    pub n_chunks: usize,
    pub accuracy: f64,
    pub n_format_failures: usize,
    pub n_backend_failures: usize,
}

/// Evaluates every (chunk size, top-k) combination. One index is built per
/// chunk size.
pub fn run_sweep(
    items: &[McqItem],
    corpus: &Corpus,
    chunk_sizes: &[usize],
    top_ks: &[usize],
    backends: &RagBackends<'_>,
    prompts: &PromptSet,
) -> Result<(Vec<SweepCell>, BTreeMap<String, EvalResult>), RagError> {
    let mut cells = Vec::new();
    let mut details = BTreeMap::new();
    for &size in chunk_sizes {
        let index = build_index(chunk_corpus(corpus, size)?, backends.embedder)?;
        for &k in top_ks {
            let cfg = RagConfig::new(size, k);
            let r = run_eval(items, &index, &cfg, backends, prompts)?;
            cells.push(SweepCell {
                chunk_size: size,
                top_k: k,
                retrieve_k: cfg.retrieve_k,
                n_chunks: index.len(),
                accuracy: r.accuracy,
                n_format_failures: r.n_format_failures,
                n_backend_failures: r.n_backend_failures,
            });
            details.insert(format!("c{size}_k{k}"), r);
        }
    }
    Ok((cells, details))
}

/// Token renderings cut by chunk boundaries: renderings present in a
/// document but not intact inside any of its chunks. Used as a post-hoc check.
pub fn split_tokens(doc: &Document, chunks: &[Chunk]) -> Vec<String> {
    let mine: Vec<&Chunk> = chunks.iter().filter(|c| c.doc_id == doc.doc_id).collect();
    let mut missing = Vec::new();
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for m in crate::detcrypt::parse_cipher_tokens(&doc.text) {
        *expected.entry(doc.text[m.bytes].to_string()).or_insert(0) += 1;
    }
    for (rendering, n) in expected {
        let found: usize = mine
            .iter()
            .map(|c| {
                crate::detcrypt::parse_cipher_tokens(&c.text)
                    .iter()
                    .filter(|m| c.text[m.bytes.clone()] == rendering)
                    .count()
            })
            .sum();
        if found != n {
            missing.push(rendering);
        }
    }
    missing
}
