//! Leakage and ciphertext-hallucination audits over synthetic text.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, write_jsonl, Corpus, CorpusError, Document};
use crate::detcrypt::{parse_cipher_tokens, repair_base64, Canonicalizer, DecryptStatus, DetCipher};
use crate::pii::{detect_regex, EntityType, RecognizerSet, SpanMap};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("plaintext inventory is empty")]
    EmptyInventory,
    #[error("document {0} has no article key")]
    MissingArticleKey(String),
    #[error("response refers to article {0}, which is not in the cipher inventory")]
    UnknownArticle(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub surface: String,
    pub entity_type: EntityType,
    pub source_doc_id: String,
}

/// Known plaintext PII surfaces, canonicalised the same way as the cipher.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlaintextInventory {
    pub entries: Vec<InventoryEntry>,
}

impl PlaintextInventory {
    /// One entry per distinct (surface, type, document).
    pub fn from_spans(spans: &SpanMap, canon: Canonicalizer) -> Self {
        let set: BTreeSet<InventoryEntry> = spans
            .values()
            .flatten()
            .filter_map(|s| {
                let surface = canon.canonical(&s.surface);
                (!surface.is_empty()).then(|| InventoryEntry {
                    surface,
                    entity_type: s.entity_type,
                    source_doc_id: s.doc_id.clone(),
                })
            })
            .collect();
        PlaintextInventory {
            entries: set.into_iter().collect(),
        }
    }

    pub fn per_type_counts(&self) -> BTreeMap<EntityType, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.entity_type).or_insert(0) += 1;
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, AuditError> {
        Ok(PlaintextInventory {
            entries: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AuditError> {
        Ok(write_jsonl(path, &self.entries)?)
    }
}

/// Counts inventory surfaces occurring outside cipher-token renderings.
/// Longer surfaces are matched first and consume their occurrences, so
/// "John Smith" is not also counted as "John".
#[derive(Debug, Clone)]
pub struct PlaintextMatcher {
    surfaces: Vec<(String, EntityType)>,
    canon: Canonicalizer,
}

impl PlaintextMatcher {
    pub fn new(inventory: &PlaintextInventory, canon: Canonicalizer) -> Self {
        let mut seen = BTreeMap::new();
        for e in &inventory.entries {
            let s = canon.canonical(&e.surface);
            if !s.is_empty() {
                seen.entry(s).or_insert(e.entity_type);
            }
        }
        let mut surfaces: Vec<(String, EntityType)> = seen.into_iter().collect();
        surfaces.sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()).then_with(|| a.0.cmp(&b.0)));
        PlaintextMatcher { surfaces, canon }
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn hits(&self, text: &str) -> BTreeMap<EntityType, usize> {
        let mut work = self.canon_text(&mask_tokens(text));
        let mut out = BTreeMap::new();
        for (surface, t) in &self.surfaces {
            let n = work.matches(surface.as_str()).count();
            if n > 0 {
                *out.entry(*t).or_insert(0) += n;
                work = work.replace(surface.as_str(), "\u{0}");
            }
        }
        out
    }

    /// First inventory surface found outside tokens, if any.
    pub fn first_hit(&self, text: &str) -> Option<&str> {
        let work = self.canon_text(&mask_tokens(text));
        self.surfaces
            .iter()
            .find(|(s, _)| work.contains(s.as_str()))
            .map(|(s, _)| s.as_str())
    }

    fn canon_text(&self, text: &str) -> String {
        use unicode_normalization::UnicodeNormalization;
        let nfc: String = text.nfc().collect();
        if self.canon.casefold {
            nfc.to_lowercase()
        } else {
            nfc
        }
    }
}

/// Replaces every token rendering with a NUL so nothing inside a payload can
/// match a surface and nothing matches across a token.
pub fn mask_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in parse_cipher_tokens(text) {
        out.push_str(&text[last..m.bytes.start]);
        out.push('\u{0}');
        last = m.bytes.end;
    }
    out.push_str(&text[last..]);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakCount {
    pub unencrypted: usize,
    pub encrypted: usize,
    /// `unencrypted / encrypted`; absent when nothing was encrypted.
    pub ratio: Option<f64>,
}

impl LeakCount {
    fn new(unencrypted: usize, encrypted: usize) -> Self {
        LeakCount {
            unencrypted,
            encrypted,
            ratio: (encrypted > 0).then(|| unencrypted as f64 / encrypted as f64),
        }
    }

    fn add(&mut self, other: &LeakCount) {
        *self = LeakCount::new(self.unencrypted + other.unencrypted, self.encrypted + other.encrypted);
    }

    /// `1:N` form, `0` when nothing leaked, `N/A` when nothing was encrypted.
    pub fn display(&self) -> String {
        match self.ratio {
            None => "N/A".into(),
            Some(_) if self.unencrypted == 0 => "0".into(),
            Some(r) => format!("1:{}", (1.0 / r).round() as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocLeak {
    pub doc_id: String,
    pub counts: LeakCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub per_type: BTreeMap<EntityType, LeakCount>,
    pub total: LeakCount,
    pub total_display: String,
    pub per_doc: Vec<DocLeak>,
    /// Structured-type matches found by re-running the recognizers on text
    /// outside tokens. Absent when no recognizers were supplied.
    pub recognizer_hits: Option<BTreeMap<EntityType, usize>>,
}

fn doc_counts(
    doc: &Document,
    matcher: &PlaintextMatcher,
    recognizers: Option<&RecognizerSet>,
) -> (BTreeMap<EntityType, LeakCount>, BTreeMap<EntityType, usize>) {
    let mut encrypted: BTreeMap<EntityType, usize> = BTreeMap::new();
    for m in parse_cipher_tokens(&doc.text) {
        *encrypted.entry(m.token.entity_type).or_insert(0) += 1;
    }
    let plain = matcher.hits(&doc.text);
    let types: BTreeSet<EntityType> = encrypted.keys().chain(plain.keys()).copied().collect();
    let counts = types
        .into_iter()
        .map(|t| {
            let c = LeakCount::new(
                plain.get(&t).copied().unwrap_or(0),
                encrypted.get(&t).copied().unwrap_or(0),
            );
            (t, c)
        })
        .collect();
    let mut structured = BTreeMap::new();
    if let Some(set) = recognizers {
        let mut masked = doc.clone();
        masked.text = mask_tokens(&doc.text);
        for s in detect_regex(&masked, set) {
            *structured.entry(s.entity_type).or_insert(0) += 1;
        }
    }
    (counts, structured)
}

/// Counts tokens per type and plaintext inventory hits outside tokens, per
/// document and in total.
pub fn leakage_report(
    synthetic: &Corpus,
    inventory: &PlaintextInventory,
    canon: Canonicalizer,
    recognizers: Option<&RecognizerSet>,
) -> Result<LeakageReport, AuditError> {
    if inventory.is_empty() {
        return Err(AuditError::EmptyInventory);
    }
    let matcher = PlaintextMatcher::new(inventory, canon);
    let per: Vec<_> = synthetic
        .documents()
        .par_iter()
        .map(|d| (d.doc_id.clone(), doc_counts(d, &matcher, recognizers)))
        .collect();
    let mut per_type: BTreeMap<EntityType, LeakCount> = inventory
        .per_type_counts()
        .keys()
        .map(|t| (*t, LeakCount::new(0, 0)))
        .collect();
    let mut total = LeakCount::new(0, 0);
    let mut per_doc = Vec::with_capacity(per.len());
    let mut hits: BTreeMap<EntityType, usize> = BTreeMap::new();
    for (doc_id, (counts, structured)) in per {
        let mut doc_total = LeakCount::new(0, 0);
        for (t, c) in counts {
            per_type.entry(t).or_default().add(&c);
            doc_total.add(&c);
        }
        total.add(&doc_total);
        per_doc.push(DocLeak {
            doc_id,
            counts: doc_total,
        });
        for (t, n) in structured {
            *hits.entry(t).or_insert(0) += n;
        }
    }
    for c in per_type.values_mut() {
        *c = LeakCount::new(c.unencrypted, c.encrypted);
    }
    Ok(LeakageReport {
        per_type,
        total_display: total.display(),
        total,
        per_doc,
        recognizer_hits: recognizers.map(|_| hits),
    })
}

/// Valid token payloads seen in each article's synthetic data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CipherInventory {
    pub by_article: BTreeMap<String, BTreeSet<String>>,
}

impl CipherInventory {
    pub fn articles_with(&self, payload: &str) -> Vec<&str> {
        self.by_article
            .iter()
            .filter(|(_, set)| set.contains(payload))
            .map(|(a, _)| a.as_str())
            .collect()
    }
}

/// Article of a document: `meta[group_key]`, else the first parent id. The
/// key `doc_id` groups each document by its own id.
pub fn article_key(doc: &Document, group_key: &str) -> Option<String> {
    if group_key == "doc_id" {
        return Some(doc.doc_id.clone());
    }
    doc.meta
        .get(group_key)
        .cloned()
        .or_else(|| doc.parent_ids.first().cloned())
}

pub fn build_cipher_inventory(synthetic: &Corpus, group_key: &str) -> Result<CipherInventory, AuditError> {
    let mut inv = CipherInventory::default();
    for doc in synthetic.documents() {
        let tokens: Vec<String> = parse_cipher_tokens(&doc.text)
            .into_iter()
            .filter(|m| m.valid)
            .map(|m| m.token.payload_b64)
            .collect();
        let article = article_key(doc, group_key).ok_or_else(|| AuditError::MissingArticleKey(doc.doc_id.clone()))?;
        inv.by_article.entry(article).or_default().extend(tokens);
    }
    Ok(inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitationClass {
    Correct,
    #[serde(rename = "FCAOA")]
    Fcaoa,
    #[serde(rename = "FCND")]
    Fcnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcndCause {
    Base64Format,
    Pkcs7Padding,
    /// Decrypts cleanly but appears in no article's synthetic data.
    NotInInventory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub article_id: String,
    pub rendering: String,
    pub class: CitationClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<FcndCause>,
    pub status: DecryptStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plaintext: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub unique_failures: usize,
    pub unique_ciphers: usize,
    pub unique_ratio: f64,
    pub total_failures: usize,
    pub total_ciphers: usize,
    pub total_ratio: f64,
    pub fcaoa: usize,
    pub fcnd: usize,
    pub fcnd_causes: BTreeMap<FcndCause, usize>,
    /// Citations that only resolved after Base64 realignment.
    pub repaired: usize,
    pub findings: Vec<Finding>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Classifies every token in the responses as a correct citation, a
/// cross-article citation (FCAOA) or a non-decodable / unknown one (FCND).
/// Unique counts key on the payload string across all responses.
pub fn hallucination_report(
    responses: &[(String, String)],
    inventory: &CipherInventory,
    cipher: &DetCipher,
) -> Result<HallucinationReport, AuditError> {
    let mut findings = Vec::new();
    let mut all_payloads: BTreeSet<String> = BTreeSet::new();
    let mut failed_payloads: BTreeSet<String> = BTreeSet::new();
    let mut repaired = 0;
    for (article, text) in responses {
        let own = inventory
            .by_article
            .get(article)
            .ok_or_else(|| AuditError::UnknownArticle(article.clone()))?;
        for m in parse_cipher_tokens(text) {
            let payload = m.token.payload_b64.clone();
            let (fixed, was_repaired) = repair_base64(&payload);
            let candidates: Vec<&str> = if was_repaired {
                vec![payload.as_str(), fixed.as_str()]
            } else {
                vec![payload.as_str()]
            };
            let outcome = cipher.decrypt_token(&m.token);
            let in_own = candidates.iter().any(|p| own.contains(*p));
            let in_other = candidates.iter().any(|p| {
                inventory
                    .by_article
                    .iter()
                    .any(|(a, set)| a != article && set.contains(*p))
            });
            let (class, cause) = if in_own {
                (CitationClass::Correct, None)
            } else if in_other && outcome.status.is_ok() {
                (CitationClass::Fcaoa, None)
            } else {
                let cause = match outcome.status {
                    DecryptStatus::FailBase64 => FcndCause::Base64Format,
                    DecryptStatus::FailPadding => FcndCause::Pkcs7Padding,
                    _ => FcndCause::NotInInventory,
                };
                (CitationClass::Fcnd, Some(cause))
            };
            if class == CitationClass::Correct && payload != fixed && !own.contains(&payload) {
                repaired += 1;
            }
            all_payloads.insert(payload.clone());
            if class != CitationClass::Correct {
                failed_payloads.insert(payload);
            }
            findings.push(Finding {
                article_id: article.clone(),
                rendering: text[m.bytes.clone()].to_string(),
                class,
                cause,
                status: outcome.status,
                plaintext: outcome.plaintext,
            });
        }
    }
    let fcaoa = findings.iter().filter(|f| f.class == CitationClass::Fcaoa).count();
    let fcnd = findings.iter().filter(|f| f.class == CitationClass::Fcnd).count();
    let mut fcnd_causes = BTreeMap::from([(FcndCause::Base64Format, 0), (FcndCause::Pkcs7Padding, 0)]);
    for f in &findings {
        if let Some(c) = f.cause {
            *fcnd_causes.entry(c).or_insert(0) += 1;
        }
    }
    Ok(HallucinationReport {
        unique_failures: failed_payloads.len(),
        unique_ciphers: all_payloads.len(),
        unique_ratio: ratio(failed_payloads.len(), all_payloads.len()),
        total_failures: fcaoa + fcnd,
        total_ciphers: findings.len(),
        total_ratio: ratio(fcaoa + fcnd, findings.len()),
        fcaoa,
        fcnd,
        fcnd_causes,
        repaired,
        findings,
    })
}
