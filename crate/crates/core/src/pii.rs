//! PII span detection: structured-pattern recognizers, the NER sidecar, span
//! merging and the manual review file.
//!
//! All offsets are Unicode codepoint offsets into the document text, never
//! byte offsets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document};
use crate::sidecar::{SidecarClient, SidecarError};

/// Spans grouped by document id.
pub type SpanMap = BTreeMap<String, Vec<EntitySpan>>;

#[derive(Debug, Error)]
pub enum PiiError {
    #[error("recognizer for {entity_type} failed to compile: {detail}")]
    InvalidPattern {
        entity_type: EntityType,
        detail: String,
    },
    #[error("unknown validator {0:?}")]
    UnknownValidator(String),
    #[error("recognizer set is empty")]
    EmptyRecognizers,
    #[error("spans reference more than one document")]
    MixedDocuments,
    #[error("span {start}..{end} is not valid for document {doc_id:?}")]
    InvalidSpan {
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("review line {line_no}: unknown verdict {verdict:?}")]
    UnknownVerdict { line_no: usize, verdict: String },
    #[error("review line {line_no}: {detail}")]
    MalformedReview { line_no: usize, detail: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sidecar(#[from] SidecarError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PiiError + '_ {
    move |source| PiiError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityType {
    Person,
    Location,
    Org,
    Phone,
    IdNumber,
    BankCard,
    Date,
    Other,
}

impl EntityType {
    pub const ALL: [EntityType; 8] = [
        EntityType::Person,
        EntityType::Location,
        EntityType::Org,
        EntityType::Phone,
        EntityType::IdNumber,
        EntityType::BankCard,
        EntityType::Date,
        EntityType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Location => "LOCATION",
            EntityType::Org => "ORG",
            EntityType::Phone => "PHONE",
            EntityType::IdNumber => "ID_NUMBER",
            EntityType::BankCard => "BANK_CARD",
            EntityType::Date => "DATE",
            EntityType::Other => "OTHER",
        }
    }

    /// Types that regex recognizers are responsible for.
    pub fn is_structured(self) -> bool {
        matches!(
            self,
            EntityType::Phone | EntityType::IdNumber | EntityType::BankCard | EntityType::Date
        )
    }

    /// Lenient mapping for labels coming from NER models and LLMs.
    pub fn from_label(label: &str) -> EntityType {
        label.parse().unwrap_or(EntityType::Other)
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "PERSON" | "PER" | "NAME" | "PEOPLE" => EntityType::Person,
            "LOCATION" | "LOC" | "GPE" | "ADDRESS" | "FAC" => EntityType::Location,
            "ORG" | "ORGANIZATION" | "ORGANISATION" => EntityType::Org,
            "PHONE" | "PHONE_NUMBER" => EntityType::Phone,
            "ID_NUMBER" | "ID" | "ID_CARD" => EntityType::IdNumber,
            "BANK_CARD" | "CARD" | "CREDIT_CARD" => EntityType::BankCard,
            "DATE" | "DATE_TIME" => EntityType::Date,
            "OTHER" | "MISC" => EntityType::Other,
            _ => return Err(format!("unknown entity type {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Regex,
    NerSidecar,
    Llm,
    Manual,
}

impl Detector {
    /// Merge priority, higher wins. Reviewer decisions outrank every detector.
    fn priority(self) -> u8 {
        match self {
            Detector::Manual => 3,
            Detector::Regex => 2,
            Detector::NerSidecar => 1,
            Detector::Llm => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: EntityType,
    pub detector: Detector,
    pub confidence: f64,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Checks `0 <= start < end <= len(text)` and `surface == text[start..end)`.
    pub fn is_valid_for(&self, text: &str) -> bool {
        self.start < self.end
            && char_slice(text, self.start..self.end).is_some_and(|s| s == self.surface)
    }
}

/// Slice `text` by codepoint range. `None` when out of bounds.
pub fn char_slice(text: &str, range: Range<usize>) -> Option<&str> {
    if range.start > range.end {
        return None;
    }
    let start = char_to_byte(text, range.start)?;
    let end = char_to_byte(text, range.end)?;
    Some(&text[start..end])
}

/// Byte offset of codepoint `idx`; `idx == char count` maps to `text.len()`.
pub fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .nth(idx)
}

/// Byte to codepoint offset table for one text.
pub(crate) struct CharIndex {
    starts: Vec<usize>,
}

impl CharIndex {
    pub(crate) fn new(text: &str) -> Self {
        let mut starts: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        starts.push(text.len());
        CharIndex { starts }
    }

    /// `byte` must lie on a char boundary.
    pub(crate) fn to_char(&self, byte: usize) -> usize {
        self.starts.partition_point(|&b| b < byte)
    }

    pub(crate) fn to_byte(&self, ch: usize) -> usize {
        self.starts[ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validator {
    Luhn,
    CnId,
}

impl Validator {
    fn check(self, surface: &str) -> bool {
        match self {
            Validator::Luhn => luhn_valid(surface),
            Validator::CnId => cn_id_valid(surface),
        }
    }
}

/// Luhn checksum over the digits of `s`, ignoring spaces and dashes.
pub fn luhn_valid(s: &str) -> bool {
    let digits: Vec<u32> = s
        .chars()
        .filter(|c| *c != ' ' && *c != '-')
        .map(|c| c.to_digit(10))
        .collect::<Option<_>>()
        .unwrap_or_default();
    if !(13..=19).contains(&digits.len()) {
        return false;
    }
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let d2 = d * 2;
                if d2 > 9 {
                    d2 - 9
                } else {
                    d2
                }
            } else {
                d
            }
        })
        .sum();
    sum.is_multiple_of(10)
}

/// ISO 7064 MOD 11-2 check character of an 18-character resident ID.
pub fn cn_id_valid(s: &str) -> bool {
    const WEIGHTS: [u32; 17] = [7, 9, 10, 5, 8, 4, 2, 1, 6, 3, 7, 9, 10, 5, 8, 4, 2];
    const CHECK: &[u8; 11] = b"10X98765432";
    let bytes = s.as_bytes();
    if bytes.len() != 18 {
        return false;
    }
    let mut sum = 0;
    for (b, w) in bytes[..17].iter().zip(WEIGHTS) {
        match (*b as char).to_digit(10) {
            Some(d) => sum += d * w,
            None => return false,
        }
    }
    bytes[17].to_ascii_uppercase() == CHECK[(sum % 11) as usize]
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    pub entity_type: EntityType,
    pub pattern: Regex,
    pub validator: Option<Validator>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternSpec {
    pattern: String,
    #[serde(default)]
    validator: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RecognizerSet {
    recognizers: Vec<Recognizer>,
}

const DEFAULT_RECOGNIZERS: &str = include_str!("../assets/recognizers.json");

impl RecognizerSet {
    /// Parses a pattern file: a JSON object mapping entity type to a list of
    /// `{pattern, validator}` entries.
    pub fn from_json(json: &str) -> Result<Self, PiiError> {
        let raw: BTreeMap<String, Vec<PatternSpec>> =
            serde_json::from_str(json).map_err(|e| PiiError::MalformedReview {
                line_no: e.line(),
                detail: e.to_string(),
            })?;
        let mut recognizers = Vec::new();
        for (type_name, specs) in raw {
            let entity_type = type_name.parse().map_err(|detail| PiiError::InvalidPattern {
                entity_type: EntityType::Other,
                detail,
            })?;
            for spec in specs {
                let pattern =
                    Regex::new(&spec.pattern).map_err(|e| PiiError::InvalidPattern {
                        entity_type,
                        detail: e.to_string(),
                    })?;
                let validator = match spec.validator.as_deref() {
                    None | Some("") | Some("none") => None,
                    Some("luhn") => Some(Validator::Luhn),
                    Some("cn_id") => Some(Validator::CnId),
                    Some(other) => return Err(PiiError::UnknownValidator(other.to_string())),
                };
                recognizers.push(Recognizer {
                    entity_type,
                    pattern,
                    validator,
                });
            }
        }
        if recognizers.is_empty() {
            return Err(PiiError::EmptyRecognizers);
        }
        Ok(RecognizerSet { recognizers })
    }

    pub fn from_file(path: &Path) -> Result<Self, PiiError> {
        let json = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&json)
    }

    /// Shipped phone, ID number, bank card and date patterns.
    pub fn default_set() -> Self {
        Self::from_json(DEFAULT_RECOGNIZERS).expect("shipped recognizer file is valid")
    }

    pub fn recognizers(&self) -> &[Recognizer] {
        &self.recognizers
    }

    pub fn len(&self) -> usize {
        self.recognizers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recognizers.is_empty()
    }
}

fn is_ascii_alnum_at(text: &str, byte: usize, before: bool) -> bool {
    let c = if before {
        text[..byte].chars().next_back()
    } else {
        text[byte..].chars().next()
    };
    c.is_some_and(|c| c.is_ascii_alphanumeric())
}

/// Non-overlapping matches of one recognizer whose edges do not touch ASCII
/// alphanumerics and which pass the validator. A rejected candidate is retried
/// one character later, so a valid match nested in a rejected one is found.
fn recognizer_matches(rec: &Recognizer, text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos <= text.len() {
        let Some(m) = rec.pattern.find_at(text, pos) else {
            break;
        };
        let ok = !m.is_empty()
            && !is_ascii_alnum_at(text, m.start(), true)
            && !is_ascii_alnum_at(text, m.end(), false)
            && rec.validator.is_none_or(|v| v.check(m.as_str()));
        if ok {
            out.push(m.range());
            pos = m.end();
        } else {
            pos = m.start()
                + text[m.start()..]
                    .chars()
                    .next()
                    .map(char::len_utf8)
                    .unwrap_or(1);
        }
    }
    out
}

/// Runs every recognizer over the document. Matches of different
/// recognizers may overlap; use [`merge_spans`] to resolve them.
pub fn detect_regex(doc: &Document, recognizers: &RecognizerSet) -> Vec<EntitySpan> {
    let index = CharIndex::new(&doc.text);
    let mut spans: Vec<EntitySpan> = recognizers
        .recognizers
        .iter()
        .flat_map(|rec| {
            recognizer_matches(rec, &doc.text)
                .into_iter()
                .map(|r| EntitySpan {
                    doc_id: doc.doc_id.clone(),
                    start: index.to_char(r.start),
                    end: index.to_char(r.end),
                    surface: doc.text[r].to_string(),
                    entity_type: rec.entity_type,
                    detector: Detector::Regex,
                    confidence: 1.0,
                })
        })
        .collect();
    spans.sort_by(|a, b| {
        (a.start, a.end, a.entity_type).cmp(&(b.start, b.end, b.entity_type))
    });
    spans.dedup_by(|a, b| a.start == b.start && a.end == b.end && a.entity_type == b.entity_type);
    spans
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SidecarDetection {
    pub spans: Vec<EntitySpan>,
    /// Spans discarded because their offsets or surface did not fit the text.
    pub dropped: usize,
}

pub fn detect_sidecar(
    doc: &Document,
    client: &dyn SidecarClient,
) -> Result<SidecarDetection, PiiError> {
    let raw = client.ner(&doc.text, &doc.lang)?;
    let mut detection = SidecarDetection::default();
    for span in raw {
        let Some(surface) = char_slice(&doc.text, span.start..span.end) else {
            detection.dropped += 1;
            continue;
        };
        if span.start >= span.end || span.surface.as_deref().is_some_and(|s| s != surface) {
            detection.dropped += 1;
            continue;
        }
        detection.spans.push(EntitySpan {
            doc_id: doc.doc_id.clone(),
            start: span.start,
            end: span.end,
            surface: surface.to_string(),
            entity_type: EntityType::from_label(&span.entity_type),
            detector: Detector::NerSidecar,
            confidence: span.confidence.unwrap_or(1.0).clamp(0.0, 1.0),
        });
    }
    if detection.dropped > 0 {
        tracing::warn!(doc_id = %doc.doc_id, dropped = detection.dropped, "sidecar spans dropped");
    }
    detection.spans.sort_by_key(|s| (s.start, s.end));
    Ok(detection)
}

/// Resolves overlaps. Priority order: detector (manual > regex > sidecar >
/// llm), then longer span, then earlier start. Output is sorted by start and
/// pairwise non-overlapping.
pub fn merge_spans(spans: Vec<EntitySpan>) -> Result<Vec<EntitySpan>, PiiError> {
    if let Some(first) = spans.first() {
        if spans.iter().any(|s| s.doc_id != first.doc_id) {
            return Err(PiiError::MixedDocuments);
        }
    }
    let mut ranked = spans;
    ranked.sort_by(|a, b| {
        b.detector
            .priority()
            .cmp(&a.detector.priority())
            .then(b.len().cmp(&a.len()))
            .then(a.start.cmp(&b.start))
            .then(a.entity_type.cmp(&b.entity_type))
            .then(a.detector.cmp(&b.detector))
    });
    let mut kept: Vec<EntitySpan> = Vec::with_capacity(ranked.len());
    for span in ranked {
        if !kept.iter().any(|k| k.overlaps(&span)) {
            kept.push(span);
        }
    }
    kept.sort_by_key(|s| s.start);
    Ok(kept)
}

/// Combined detector: regex recognizers plus an optional NER sidecar.
#[derive(Clone)]
pub struct PiiDetector {
    pub recognizers: RecognizerSet,
    pub sidecar: Option<Arc<dyn SidecarClient>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detection {
    pub spans: SpanMap,
    pub dropped: usize,
}

impl PiiDetector {
    pub fn new(recognizers: RecognizerSet, sidecar: Option<Arc<dyn SidecarClient>>) -> Self {
        PiiDetector {
            recognizers,
            sidecar,
        }
    }

    pub fn detect(&self, doc: &Document) -> Result<SidecarDetection, PiiError> {
        let mut spans = detect_regex(doc, &self.recognizers);
        let mut dropped = 0;
        if let Some(client) = &self.sidecar {
            let found = detect_sidecar(doc, client.as_ref())?;
            dropped = found.dropped;
            spans.extend(found.spans);
        }
        Ok(SidecarDetection {
            spans: merge_spans(spans)?,
            dropped,
        })
    }

    /// Detects over every document in parallel.
    pub fn detect_corpus(&self, corpus: &Corpus) -> Result<Detection, PiiError> {
        let per_doc: Vec<(String, SidecarDetection)> = corpus
            .documents()
            .par_iter()
            .map(|d| self.detect(d).map(|r| (d.doc_id.clone(), r)))
            .collect::<Result<_, _>>()?;
        let mut out = Detection::default();
        for (id, det) in per_doc {
            out.dropped += det.dropped;
            out.spans.insert(id, det.spans);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReviewHeader {
    format: String,
    version: u32,
    verdicts: Vec<String>,
}

const REVIEW_FORMAT: &str = "pii-review";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReviewRecord {
    doc_id: String,
    start: usize,
    end: usize,
    surface: String,
    entity_type: EntityType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detector: Option<Detector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(default)]
    verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ReviewLine {
    Header { review: ReviewHeader },
    Record(ReviewRecord),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop,
    Retype(EntityType),
}

impl FromStr for Verdict {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "" | "keep" => Ok(Verdict::Keep),
            "drop" => Ok(Verdict::Drop),
            _ => s
                .split_once(':')
                .filter(|(head, _)| head.eq_ignore_ascii_case("retype"))
                .and_then(|(_, t)| t.parse().ok())
                .map(Verdict::Retype)
                .ok_or(()),
        }
    }
}

fn validate_spans<'a>(corpus: &'a Corpus, doc_id: &str, spans: &[EntitySpan]) -> Result<&'a Document, PiiError> {
    let doc = corpus
        .get(doc_id)
        .ok_or_else(|| PiiError::UnknownDocument(doc_id.to_string()))?;
    if let Some(bad) = spans.iter().find(|s| s.doc_id != doc_id || !s.is_valid_for(&doc.text)) {
        return Err(PiiError::InvalidSpan {
            doc_id: bad.doc_id.clone(),
            start: bad.start,
            end: bad.end,
        });
    }
    Ok(doc)
}

/// Writes a review file: a header line, then one record per span with an
/// empty `verdict` for the reviewer to fill in (`keep`, `drop`,
/// `retype:<TYPE>`).
pub fn export_review(corpus: &Corpus, spans: &SpanMap, path: &Path) -> Result<(), PiiError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = ReviewLine::Header {
        review: ReviewHeader {
            format: REVIEW_FORMAT.to_string(),
            version: 1,
            verdicts: vec!["keep".into(), "drop".into(), "retype:<TYPE>".into()],
        },
    };
    let mut lines = vec![header];
    for doc in corpus.documents() {
        let Some(doc_spans) = spans.get(&doc.doc_id) else {
            continue;
        };
        validate_spans(corpus, &doc.doc_id, doc_spans)?;
        lines.extend(doc_spans.iter().map(|s| {
            ReviewLine::Record(ReviewRecord {
                doc_id: s.doc_id.clone(),
                start: s.start,
                end: s.end,
                surface: s.surface.clone(),
                entity_type: s.entity_type,
                detector: Some(s.detector),
                confidence: Some(s.confidence),
                verdict: String::new(),
            })
        }));
    }
    if let Some(unknown) = spans.keys().find(|id| corpus.get(id).is_none()) {
        return Err(PiiError::UnknownDocument(unknown.clone()));
    }
    for line in lines {
        let json = serde_json::to_string(&line).expect("review records serialize");
        writeln!(out, "{json}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads an edited review file. `keep` (or an empty verdict) keeps the span
/// as detected; `retype:<T>` re-emits it as a manual span of type `T`;
/// `drop` removes it. Records added by hand without a detector become manual
/// spans. Spans are re-validated against the corpus.
pub fn import_review(path: &Path, corpus: &Corpus) -> Result<SpanMap, PiiError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut spans = SpanMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReviewLine =
            serde_json::from_str(&line).map_err(|e| PiiError::MalformedReview {
                line_no,
                detail: e.to_string(),
            })?;
        let record = match parsed {
            ReviewLine::Header { .. } => continue,
            ReviewLine::Record(r) => r,
        };
        let verdict: Verdict = record.verdict.parse().map_err(|_| PiiError::UnknownVerdict {
            line_no,
            verdict: record.verdict.clone(),
        })?;
        let manual = record.detector.is_none();
        let mut span = EntitySpan {
            doc_id: record.doc_id,
            start: record.start,
            end: record.end,
            surface: record.surface,
            entity_type: record.entity_type,
            detector: record.detector.unwrap_or(Detector::Manual),
            confidence: record.confidence.unwrap_or(1.0),
        };
        match verdict {
            Verdict::Drop => continue,
            Verdict::Keep if manual => span.confidence = 1.0,
            Verdict::Keep => {}
            Verdict::Retype(t) => {
                span.entity_type = t;
                span.detector = Detector::Manual;
                span.confidence = 1.0;
            }
        }
        spans.entry(span.doc_id.clone()).or_default().push(span);
    }
    for (doc_id, doc_spans) in spans.iter_mut() {
        validate_spans(corpus, doc_id, doc_spans)?;
        *doc_spans = merge_spans(std::mem::take(doc_spans))?;
    }
    Ok(spans)
}
