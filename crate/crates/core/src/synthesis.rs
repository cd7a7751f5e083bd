//! Tuple-conditioned generation of QA pairs and relation analyses.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{PlaintextInventory, PlaintextMatcher};
use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::corpus::{persist, Corpus, CorpusError, Document};
use crate::detcrypt::Canonicalizer;
use crate::graph::{EntityGraph, EntityTuple};
use crate::prompt::{self, PromptSet};

pub const DEFAULT_AVG_RECORD_TOKENS: usize = 300;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no tuples to synthesize from")]
    EmptyTupleSet,
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("average record size estimate must be positive")]
    ZeroEstimate,
    #[error("backend failure for tuple {tuple_id}: {source}")]
    Backend {
        tuple_id: String,
        #[source]
        source: BackendError,
    },
    #[error("record {0} was not accepted by the filter")]
    NotAccepted(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    QaPair,
    RelationAnalysis,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::QaPair => "qa_pair",
            SynthKind::RelationAnalysis => "relation_analysis",
        }
    }

    fn template(self, prompts: &PromptSet) -> &str {
        match self {
            SynthKind::QaPair => &prompts.qa_pair,
            SynthKind::RelationAnalysis => &prompts.relation_analysis,
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa" | "qa_pair" => Ok(SynthKind::QaPair),
            "relation" | "relation_analysis" => Ok(SynthKind::RelationAnalysis),
            other => Err(format!("unknown synthesis kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub record_id: String,
    pub kind: SynthKind,
    pub tuple: EntityTuple,
    pub text: String,
    pub source_doc_ids: Vec<String>,
    #[serde(default)]
    pub backend_meta: BTreeMap<String, Value>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub budget_tokens: usize,
    pub tuples: Vec<EntityTuple>,
    pub per_tuple_records: usize,
}

/// `per_tuple_records = ceil(budget / (tuples * estimate))`.
pub fn plan(budget_tokens: usize, tuples: Vec<EntityTuple>, avg_record_tokens: usize) -> Result<SynthPlan, SynthError> {
    if tuples.is_empty() {
        return Err(SynthError::EmptyTupleSet);
    }
    if budget_tokens == 0 {
        return Err(SynthError::ZeroBudget);
    }
    if avg_record_tokens == 0 {
        return Err(SynthError::ZeroEstimate);
    }
    let per_tuple_records = budget_tokens.div_ceil(tuples.len().saturating_mul(avg_record_tokens)).max(1);
    Ok(SynthPlan {
        budget_tokens,
        tuples,
        per_tuple_records,
    })
}

/// Lines of the context documents that mention at least one member; the
/// whole text when none do.
pub fn excerpt(docs: &[&Document], members: &[String]) -> String {
    let mut lines = Vec::new();
    for d in docs {
        let text = prompt::compact(&d.text);
        let hit: Vec<&str> = text
            .lines()
            .filter(|l| members.iter().any(|m| l.contains(m.as_str())))
            .collect();
        if hit.is_empty() {
            lines.extend(text.lines().map(str::to_string));
        } else {
            lines.extend(hit.into_iter().map(str::to_string));
        }
    }
    lines.join("\n")
}

/// Documents that mention any tuple member, in corpus order.
pub fn tuple_context<'c>(tuple: &EntityTuple, graph: &EntityGraph, corpus: &'c Corpus) -> Vec<&'c Document> {
    let ids: BTreeSet<&str> = tuple
        .members
        .iter()
        .filter_map(|m| graph.node(m))
        .flat_map(|n| n.doc_refs.iter().map(String::as_str))
        .collect();
    corpus
        .documents()
        .iter()
        .filter(|d| ids.contains(d.doc_id.as_str()))
        .collect()
}

/// Renders the kind's prompt and asks the backend `n` times. Every completion
/// becomes one record, accepted until the filter says otherwise.
pub fn synth_for_tuple(
    tuple: &EntityTuple,
    context_docs: &[&Document],
    kind: SynthKind,
    llm: &dyn ChatBackend,
    prompts: &PromptSet,
    n: usize,
    sampling: &BTreeMap<String, Value>,
) -> Result<Vec<SynthRecord>, SynthError> {
    let title = context_docs.first().map(|d| d.title()).unwrap_or("the article");
    let text = prompt::render(
        kind.template(prompts),
        &[
            ("title", title),
            ("entities", &prompt::bullet_list(&tuple.members)),
            ("context", &excerpt(context_docs, &tuple.members)),
        ],
    );
    let source_doc_ids: Vec<String> = context_docs.iter().map(|d| d.doc_id.clone()).collect();
    let lang = context_docs.first().map(|d| d.lang.clone()).unwrap_or_else(|| "en".into());
    (0..n)
        .map(|seq| {
            let tag = format!("synth:{}:{}:{seq}", kind.as_str(), tuple.tuple_id);
            let mut req = ChatRequest::user(tag.clone(), text.clone());
            req.sampling = sampling.clone();
            let out = llm.chat(&req).map_err(|source| SynthError::Backend {
                tuple_id: tuple.tuple_id.clone(),
                source,
            })?;
            let mut meta = BTreeMap::new();
            meta.insert("tag".to_string(), Value::String(tag));
            meta.insert("lang".to_string(), Value::String(lang.clone()));
            meta.insert("sampling".to_string(), serde_json::to_value(sampling).unwrap_or_default());
            Ok(SynthRecord {
                record_id: format!("{}-{}-{seq:04}", tuple.tuple_id, kind.as_str()),
                kind,
                tuple: tuple.clone(),
                text: out,
                source_doc_ids: source_doc_ids.clone(),
                backend_meta: meta,
                accepted: true,
                reject_reason: None,
            })
        })
        .collect()
}

/// Runs every tuple of the plan in parallel. Records come back in tuple order.
pub fn run_plan(
    plan: &SynthPlan,
    graph: &EntityGraph,
    corpus: &Corpus,
    kind: SynthKind,
    llm: &dyn ChatBackend,
    prompts: &PromptSet,
    sampling: &BTreeMap<String, Value>,
) -> Result<Vec<SynthRecord>, SynthError> {
    let batches: Vec<Vec<SynthRecord>> = plan
        .tuples
        .par_iter()
        .map(|t| {
            let ctx = tuple_context(t, graph, corpus);
            synth_for_tuple(t, &ctx, kind, llm, prompts, plan.per_tuple_records, sampling)
        })
        .collect::<Result<_, _>>()?;
    Ok(batches.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    #[serde(default = "default_min_length")]
    pub min_length: usize,
    #[serde(default = "default_question")]
    pub question_delimiter: String,
    #[serde(default = "default_answer")]
    pub answer_delimiter: String,
    #[serde(default)]
    pub inventory: PlaintextInventory,
    #[serde(default)]
    pub casefold: bool,
}

fn default_min_length() -> usize {
    20
}
fn default_question() -> String {
    "Question:".into()
}
fn default_answer() -> String {
    "Answer:".into()
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_length: default_min_length(),
            question_delimiter: default_question(),
            answer_delimiter: default_answer(),
            inventory: PlaintextInventory::default(),
            casefold: false,
        }
    }
}

fn first_failure(r: &SynthRecord, rules: &FilterRules, matcher: &PlaintextMatcher) -> Option<String> {
    if r.text.trim().chars().count() < rules.min_length {
        return Some("too_short".into());
    }
    if r.kind == SynthKind::QaPair {
        if !r.text.contains(&rules.question_delimiter) {
            return Some("missing_question_segment".into());
        }
        if !r.text.contains(&rules.answer_delimiter) {
            return Some("missing_answer_segment".into());
        }
    }
    if r.tuple.members.iter().any(|m| !r.text.contains(m.as_str())) {
        return Some("missing_tuple_member".into());
    }
    if matcher.first_hit(&r.text).is_some() {
        return Some("plaintext_pii".into());
    }
    None
}

/// Splits records into kept and rejected. Rejected records carry the first
/// failing rule; their content is left untouched.
pub fn filter_records(records: Vec<SynthRecord>, rules: &FilterRules) -> (Vec<SynthRecord>, Vec<SynthRecord>) {
    let matcher = PlaintextMatcher::new(&rules.inventory, Canonicalizer { casefold: rules.casefold });
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for mut r in records {
        match first_failure(&r, rules, &matcher) {
            None => kept.push(r),
            Some(reason) => {
                r.accepted = false;
                r.reject_reason = Some(reason);
                rejected.push(r);
            }
        }
    }
    (kept, rejected)
}

/// One synthetic document per record, linked to its source documents.
pub fn records_to_corpus(records: &[SynthRecord]) -> Result<Corpus, SynthError> {
    let docs = records
        .iter()
        .map(|r| {
            if !r.accepted {
                return Err(SynthError::NotAccepted(r.record_id.clone()));
            }
            let mut d = Document::synthetic(r.record_id.clone(), r.text.clone(), r.source_doc_ids.clone());
            if let Some(Value::String(lang)) = r.backend_meta.get("lang") {
                d.lang = lang.clone();
            }
            d.meta.insert("kind".into(), r.kind.as_str().into());
            d.meta.insert("tuple_id".into(), r.tuple.tuple_id.clone());
            if let Some(first) = r.source_doc_ids.first() {
                d.meta.insert("article_id".into(), first.clone());
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(docs)?)
}

pub fn emit_corpus(records: &[SynthRecord], path: &Path) -> Result<Corpus, SynthError> {
    let corpus = records_to_corpus(records)?;
    persist(&corpus, path)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::InventoryEntry;
    use crate::backend::{FixtureChat, MockChat, ScriptedChat};
    use crate::corpus::{ingest, IngestKind, Source};
    use crate::pii::EntityType;
    use proptest::prelude::*;

    fn tuple(members: &[&str]) -> EntityTuple {
        EntityTuple::new(members.iter().map(|s| s.to_string()).collect())
    }

    fn record(kind: SynthKind, members: &[&str], text: &str) -> SynthRecord {
        SynthRecord {
            record_id: "r".into(),
            kind,
            tuple: tuple(members),
            text: text.into(),
            source_doc_ids: vec!["d1".into()],
            backend_meta: BTreeMap::new(),
            accepted: true,
            reject_reason: None,
        }
    }

    #[test]
    fn plan_arithmetic() {
        let ten: Vec<_> = (0..10).map(|i| tuple(&[&format!("a{i}"), "b"])).collect();
        assert_eq!(plan(1000, ten, 100).unwrap().per_tuple_records, 1);
        assert_eq!(plan(1000, vec![tuple(&["a", "b"])], 100).unwrap().per_tuple_records, 10);
        assert_eq!(plan(1001, vec![tuple(&["a", "b"])], 100).unwrap().per_tuple_records, 11);
        assert!(matches!(plan(1000, vec![], 100), Err(SynthError::EmptyTupleSet)));
        assert!(matches!(plan(0, vec![tuple(&["a", "b"])], 100), Err(SynthError::ZeroBudget)));
    }

    #[test]
    fn prompt_carries_every_rendering() {
        let members = ["Person_[AAAA]", "Location_[BBBB]", "Org_[CCCC]"];
        let t = tuple(&members);
        let doc = Document::original("d1", "Person_[AAAA] works at Org_[CCCC].\n\nUnrelated line.");
        let chat = ScriptedChat::new(vec![Ok("reply".into())]);
        let out = synth_for_tuple(&t, &[&doc], SynthKind::QaPair, &chat, &PromptSet::default(), 1, &BTreeMap::new()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].accepted);
        let prompt = chat.requests()[0].prompt().to_string();
        for m in members {
            assert!(prompt.contains(m));
        }
        assert!(!prompt.contains("Unrelated line"));
    }

    #[test]
    fn fixed_mock_gives_one_record_per_call() {
        let chat = FixtureChat::new().fallback("Question: q? Answer: a.");
        let t = tuple(&["a", "b"]);
        let out = synth_for_tuple(&t, &[], SynthKind::QaPair, &chat, &PromptSet::default(), 3, &BTreeMap::new()).unwrap();
        assert_eq!(out.len(), 3);
        let ids: BTreeSet<_> = out.iter().map(|r| r.record_id.clone()).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn backend_failure_names_tuple() {
        let chat = ScriptedChat::new(vec![Err(BackendError::Exhausted { retries: 3, last: "timeout".into() })]);
        let t = tuple(&["a", "b"]);
        match synth_for_tuple(&t, &[], SynthKind::QaPair, &chat, &PromptSet::default(), 1, &BTreeMap::new()) {
            Err(SynthError::Backend { tuple_id, .. }) => assert_eq!(tuple_id, t.tuple_id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn filter_rules_in_order() {
        let rules = FilterRules {
            inventory: PlaintextInventory {
                entries: vec![InventoryEntry {
                    surface: "Alice".into(),
                    entity_type: EntityType::Person,
                    source_doc_id: "d1".into(),
                }],
            },
            ..FilterRules::default()
        };
        let recs = vec![
            record(SynthKind::QaPair, &["X_a", "Y_b"], "short"),
            record(SynthKind::QaPair, &["X_a", "Y_b"], "Question: how are X_a and Y_b linked? no reply"),
            record(SynthKind::RelationAnalysis, &["X_a", "Y_b"], "X_a is related to nothing at all here"),
            record(SynthKind::RelationAnalysis, &["X_a", "Y_b"], "X_a and Y_b were seen with Alice yesterday"),
            record(SynthKind::QaPair, &["X_a", "Y_b"], "Question: X_a and Y_b? Answer: they met."),
        ];
        let (kept, rejected) = filter_records(recs.clone(), &rules);
        assert_eq!(kept.len(), 1);
        let reasons: Vec<_> = rejected.iter().map(|r| r.reject_reason.clone().unwrap()).collect();
        assert_eq!(reasons, vec!["too_short", "missing_answer_segment", "missing_tuple_member", "plaintext_pii"]);
        for r in &rejected {
            assert!(!r.accepted);
            assert_eq!(r.text, recs.iter().find(|x| x.text == r.text).unwrap().text);
        }
        assert_eq!(filter_records(vec![], &rules), (vec![], vec![]));
    }

    #[test]
    fn emit_links_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        let mut r = record(SynthKind::QaPair, &["a", "b"], "Question: a b? Answer: yes");
        r.source_doc_ids = vec!["p1".into(), "p2".into()];
        let c = emit_corpus(&[r], &path).unwrap();
        assert_eq!(c.documents()[0].parent_ids, vec!["p1", "p2"]);
        assert_eq!(c.documents()[0].source, Source::Synthetic);
        assert_eq!(ingest(&path, IngestKind::Jsonl).unwrap(), c);
        let empty = emit_corpus(&[], &dir.path().join("e.jsonl")).unwrap();
        assert!(empty.is_empty());
        let mut bad = record(SynthKind::QaPair, &["a"], "x");
        bad.accepted = false;
        assert!(matches!(records_to_corpus(&[bad]), Err(SynthError::NotAccepted(_))));
    }

    #[test]
    fn mock_output_passes_filter() {
        let members = ["Person_[AAAA]", "Person_[BBBB]"];
        let t = tuple(&members);
        let doc = Document::original("d1", "Person_[AAAA] met Person_[BBBB].");
        for kind in [SynthKind::QaPair, SynthKind::RelationAnalysis] {
            let out = synth_for_tuple(&t, &[&doc], kind, &MockChat, &PromptSet::default(), 2, &BTreeMap::new()).unwrap();
            let (kept, rejected) = filter_records(out, &FilterRules::default());
            assert_eq!(kept.len(), 2, "{rejected:?}");
        }
    }

    proptest! {
        #[test]
        fn plan_is_monotone(b1 in 1usize..100_000, extra in 0usize..100_000, n in 1usize..20, est in 1usize..1000) {
            let tuples: Vec<_> = (0..n).map(|i| tuple(&[&format!("a{i}"), "b"])).collect();
            let p1 = plan(b1, tuples.clone(), est).unwrap();
            let p2 = plan(b1 + extra, tuples, est).unwrap();
            prop_assert!(p2.per_tuple_records >= p1.per_tuple_records);
        }

        #[test]
        fn filter_partitions(texts in proptest::collection::vec("[a-zA-Z :?]{0,60}", 0..20)) {
            let recs: Vec<_> = texts.iter().map(|t| record(SynthKind::QaPair, &["a", "b"], t)).collect();
            let (kept, rejected) = filter_records(recs.clone(), &FilterRules::default());
            prop_assert_eq!(kept.len() + rejected.len(), recs.len());
            for r in kept.iter().chain(&rejected) {
                prop_assert!(recs.iter().any(|x| x.text == r.text));
                prop_assert_eq!(r.accepted, r.reject_reason.is_none());
            }
        }
    }
}
