//! Document records and the line-delimited corpus format shared by every stage.
//!
//! A corpus file is UTF-8 JSONL, one document per line. Only `doc_id` and
//! `text` are required; `lang`, `source`, `parent_ids` and `meta` fall back to
//! defaults when absent.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line_no}: {detail}")]
    MalformedRecord { line_no: usize, detail: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} violates lineage: originals have no parents, synthetic documents need at least one")]
    InvalidLineage(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Original,
    Synthetic,
}

fn default_lang() -> String {
    "en".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default = "default_lang")]
    pub lang: String,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub parent_ids: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn original(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
            lang: default_lang(),
            source: Source::Original,
            parent_ids: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn synthetic(
        doc_id: impl Into<String>,
        text: impl Into<String>,
        parent_ids: Vec<String>,
    ) -> Self {
        Document {
            source: Source::Synthetic,
            parent_ids,
            ..Document::original(doc_id, text)
        }
    }

    pub fn with_lang(mut self, lang: impl Into<String>) -> Self {
        self.lang = lang.into();
        self
    }

    /// Title used in prompts: the `title` meta entry, else the doc id.
    pub fn title(&self) -> &str {
        self.meta
            .get("title")
            .map(String::as_str)
            .unwrap_or(&self.doc_id)
    }

    fn lineage_ok(&self) -> bool {
        match self.source {
            Source::Original => self.parent_ids.is_empty(),
            Source::Synthetic => !self.parent_ids.is_empty(),
        }
    }
}

/// An ordered, validated set of documents. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    token_count: usize,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
            if !doc.lineage_ok() {
                return Err(CorpusError::InvalidLineage(doc.doc_id.clone()));
            }
        }
        let token_count = documents.iter().map(|d| approx_tokens(&d.text)).sum();
        Ok(Corpus {
            documents,
            token_count,
        })
    }

    pub fn empty() -> Self {
        Corpus::default()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestKind {
    /// One JSON document per line.
    Jsonl,
    /// Every regular file in a directory becomes one document named by its stem.
    PlainDir,
}

pub fn ingest(path: &Path, kind: IngestKind) -> Result<Corpus, CorpusError> {
    match kind {
        IngestKind::Jsonl => ingest_jsonl(path),
        IngestKind::PlainDir => ingest_dir(path),
    }
}

fn ingest_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut documents = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line_no,
                detail: e.to_string(),
            })?;
        documents.push(doc);
    }
    Corpus::new(documents)
}

fn ingest_dir(path: &Path) -> Result<Corpus, CorpusError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CorpusError::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut documents = Vec::with_capacity(entries.len());
    for file in entries {
        let text = fs::read_to_string(&file).map_err(|e| CorpusError::io(&file, e))?;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        documents.push(Document::original(stem, text));
    }
    Corpus::new(documents)
}

pub fn persist(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_jsonl(path, corpus.documents())
}

/// Writes any serializable records as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| {
            CorpusError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

/// Reads JSONL records of any deserializable type, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line_no: idx + 1,
                detail: e.to_string(),
            })?,
        );
    }
    Ok(records)
}

/// True for codepoints counted as one token each (CJK ideographs, kana,
/// hangul, CJK punctuation and fullwidth forms).
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3040..=0x30FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2FA1F)
}

/// Approximate token count: whitespace-delimited runs of non-CJK text count
/// once, every CJK codepoint counts once.
pub fn approx_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if is_cjk(c) {
            count += 1;
            in_word = false;
        } else if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}
