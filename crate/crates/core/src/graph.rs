//! Weighted entity-association graph and k-tuple selection.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::corpus::{read_jsonl, write_jsonl, Corpus, CorpusError, Document};
use crate::detcrypt::{parse_cipher_tokens, Canonicalizer};
use crate::pii::{EntityType, SpanMap};
use crate::prompt::{self, PromptSet};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("backend failure during {stage}: {source}")]
    Backend {
        stage: String,
        #[source]
        source: BackendError,
    },
    #[error("no score found in response: {response:?}")]
    ScoreParseFailure { response: String },
    #[error("edge ({a}, {b}) references an unknown node")]
    DanglingEdge { a: String, b: String },
    #[error("edge from {0} to itself")]
    SelfLoop(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("tuple size {k} must satisfy 2 <= k <= {n}")]
    InvalidK { k: usize, n: usize },
    #[error("malformed graph file: {0}")]
    MalformedGraph(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub entity_id: String,
    pub entity_type: EntityType,
    pub mention_count: usize,
    pub doc_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub a: String,
    pub b: String,
    pub score: f64,
    #[serde(default)]
    pub rationale_text: String,
}

impl WeightedEdge {
    /// Stores the endpoints in ascending order.
    pub fn new(x: &str, y: &str, score: f64, rationale_text: impl Into<String>) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        WeightedEdge {
            a: a.to_string(),
            b: b.to_string(),
            score,
            rationale_text: rationale_text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub nodes: Vec<EntityNode>,
    pub edges: Vec<WeightedEdge>,
    pub threshold: f64,
    pub n: usize,
    #[serde(default)]
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityTuple {
    pub tuple_id: String,
    pub center: String,
    pub members: Vec<String>,
    pub k: usize,
}

impl EntityTuple {
    pub fn new(members: Vec<String>) -> Self {
        let mut h = Sha256::new();
        for m in &members {
            h.update(m.as_bytes());
            h.update([0x1f]);
        }
        EntityTuple {
            tuple_id: format!("k{}-{}", members.len(), hex::encode(&h.finalize()[..5])),
            center: members[0].clone(),
            k: members.len(),
            members,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TupleSet {
    pub tuples: Vec<EntityTuple>,
    /// Centers with fewer than k-1 neighbours.
    pub skipped: usize,
    /// Tuples dropped because the same member set was already emitted.
    pub duplicates: usize,
}

struct Acc {
    entity_type: EntityType,
    mentions: usize,
    docs: BTreeSet<String>,
}

fn add_mention(map: &mut BTreeMap<String, Acc>, id: String, t: EntityType, doc: &str, n: usize) {
    let acc = map.entry(id).or_insert_with(|| Acc {
        entity_type: t,
        mentions: 0,
        docs: BTreeSet::new(),
    });
    acc.mentions += n;
    acc.docs.insert(doc.to_string());
}

/// Parses `TYPE: entity` lines from an extraction response.
pub fn parse_extraction(response: &str) -> Vec<(EntityType, String)> {
    response
        .lines()
        .filter_map(|line| {
            let line = line.trim().trim_start_matches(['-', '*', ' ']);
            let (label, surface) = line.split_once(':')?;
            let t: EntityType = label.trim().parse().ok()?;
            let surface = surface.trim();
            (!surface.is_empty()).then(|| (t, surface.to_string()))
        })
        .collect()
}

/// Collects graph nodes from three sources per document: detected spans
/// (keyed by canonical surface), cipher-token renderings already in the text,
/// and, when `llm` is given, entities the model proposes. Proposals that do
/// not occur verbatim in the document or duplicate a known node are ignored.
pub fn extract_entities(
    corpus: &Corpus,
    spans: &SpanMap,
    llm: Option<&dyn ChatBackend>,
    prompts: &PromptSet,
) -> Result<Vec<EntityNode>, GraphError> {
    let canon = Canonicalizer::default();
    let mut map: BTreeMap<String, Acc> = BTreeMap::new();
    let mut per_doc_known: Vec<BTreeSet<String>> = Vec::new();
    for doc in corpus.documents() {
        let mut known = BTreeSet::new();
        for s in spans.get(&doc.doc_id).map(Vec::as_slice).unwrap_or(&[]) {
            let id = canon.canonical(&s.surface);
            if id.is_empty() {
                continue;
            }
            known.insert(id.clone());
            add_mention(&mut map, id, s.entity_type, &doc.doc_id, 1);
        }
        for m in parse_cipher_tokens(&doc.text) {
            let id = doc.text[m.bytes.clone()].to_string();
            known.insert(id.clone());
            add_mention(&mut map, id, m.token.entity_type, &doc.doc_id, 1);
        }
        per_doc_known.push(known);
    }
    if let Some(llm) = llm {
        let proposals: Vec<Vec<(EntityType, String)>> = corpus
            .documents()
            .par_iter()
            .zip(&per_doc_known)
            .map(|(doc, known)| {
                let known: Vec<&String> = known.iter().collect();
                let text = prompt::render(
                    &prompts.extract,
                    &[
                        ("title", doc.title()),
                        ("context", &prompt::compact(&doc.text)),
                        ("entities", &prompt::bullet_list(&known)),
                    ],
                );
                let req = ChatRequest::user(format!("extract:{}", doc.doc_id), text);
                llm.chat(&req)
                    .map(|r| parse_extraction(&r))
                    .map_err(|source| GraphError::Backend {
                        stage: format!("extract {}", doc.doc_id),
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        for ((doc, known), found) in corpus.documents().iter().zip(&per_doc_known).zip(proposals) {
            for (t, surface) in found {
                let id = canon.canonical(&surface);
                if id.is_empty() || known.contains(&id) || map.get(&id).is_some_and(|a| a.docs.contains(&doc.doc_id)) {
                    continue;
                }
                let n = doc.text.matches(surface.as_str()).count();
                if n > 0 {
                    add_mention(&mut map, id, t, &doc.doc_id, n);
                }
            }
        }
    }
    Ok(map
        .into_iter()
        .map(|(entity_id, acc)| EntityNode {
            entity_id,
            entity_type: acc.entity_type,
            mention_count: acc.mentions,
            doc_refs: acc.docs.into_iter().collect(),
        })
        .collect())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)").expect("number regex"))
}

/// Reads the last `Score:` line (markdown decoration and a full-width colon
/// are tolerated) and returns its first number clamped to `[0, 1]`.
pub fn parse_score(response: &str) -> Result<f64, GraphError> {
    let fail = || GraphError::ScoreParseFailure {
        response: response.to_string(),
    };
    let line = response
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim_start_matches(|c: char| c.is_whitespace() || "#*_>-`".contains(c));
            let head = l.get(..5)?;
            if !head.eq_ignore_ascii_case("score") {
                return None;
            }
            let rest = l[5..].trim_start_matches(['*', '_', ' ']);
            rest.strip_prefix(':').or_else(|| rest.strip_prefix('：'))
        })
        .ok_or_else(fail)?;
    let raw: f64 = number_re()
        .find(line)
        .and_then(|m| m.as_str().parse().ok())
        .ok_or_else(fail)?;
    if !(0.0..=1.0).contains(&raw) {
        tracing::warn!(raw, "association score outside [0, 1], clamping");
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// Documents used as context for a pair: those mentioning both, otherwise
/// those mentioning either.
pub fn pair_context<'c>(a: &EntityNode, b: &EntityNode, corpus: &'c Corpus) -> Vec<&'c Document> {
    let ra: BTreeSet<&String> = a.doc_refs.iter().collect();
    let rb: BTreeSet<&String> = b.doc_refs.iter().collect();
    let shared: Vec<&String> = ra.intersection(&rb).copied().collect();
    let ids: Vec<&String> = if shared.is_empty() {
        ra.union(&rb).copied().collect()
    } else {
        shared
    };
    ids.into_iter().filter_map(|id| corpus.get(id)).collect()
}

/// Scores one pair with the association prompt. A response without a
/// parsable score is retried once.
pub fn score_pair(
    a: &EntityNode,
    b: &EntityNode,
    context: &[&Document],
    llm: &dyn ChatBackend,
    prompts: &PromptSet,
) -> Result<WeightedEdge, GraphError> {
    let title = context.first().map(|d| d.title()).unwrap_or("the article");
    let article = context
        .iter()
        .map(|d| prompt::compact(&d.text))
        .collect::<Vec<_>>()
        .join("\n");
    let text = prompt::render(
        &prompts.association,
        &[
            ("e1", &a.entity_id),
            ("e2", &b.entity_id),
            ("title", title),
            ("context", &article),
        ],
    );
    let req = ChatRequest::user(format!("score:{}|{}", a.entity_id, b.entity_id), text);
    let mut last = None;
    for _ in 0..2 {
        let response = llm.chat(&req).map_err(|source| GraphError::Backend {
            stage: format!("score {} / {}", a.entity_id, b.entity_id),
            source,
        })?;
        match parse_score(&response) {
            Ok(score) => return Ok(WeightedEdge::new(&a.entity_id, &b.entity_id, score, response)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("loop ran"))
}

/// Scores every scheduled pair in parallel; results keep schedule order.
pub fn score_pairs(
    pairs: &[(String, String)],
    nodes: &[EntityNode],
    corpus: &Corpus,
    llm: &dyn ChatBackend,
    prompts: &PromptSet,
) -> Result<Vec<WeightedEdge>, GraphError> {
    let by_id: BTreeMap<&str, &EntityNode> = nodes.iter().map(|n| (n.entity_id.as_str(), n)).collect();
    pairs
        .par_iter()
        .map(|(x, y)| {
            let (a, b) = match (by_id.get(x.as_str()), by_id.get(y.as_str())) {
                (Some(a), Some(b)) => (*a, *b),
                _ => {
                    return Err(GraphError::DanglingEdge {
                        a: x.clone(),
                        b: y.clone(),
                    })
                }
            };
            score_pair(a, b, &pair_context(a, b, corpus), llm, prompts)
        })
        .collect()
}

/// Drops edges below `threshold` (an edge exactly at the threshold stays).
/// Repeated edges keep their highest score.
pub fn build_graph(
    nodes: Vec<EntityNode>,
    edges: Vec<WeightedEdge>,
    threshold: f64,
) -> Result<EntityGraph, GraphError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GraphError::InvalidThreshold(threshold));
    }
    let mut nodes = nodes;
    nodes.sort_by(|x, y| x.entity_id.cmp(&y.entity_id));
    nodes.dedup_by(|x, y| x.entity_id == y.entity_id);
    let ids: HashSet<&str> = nodes.iter().map(|n| n.entity_id.as_str()).collect();
    let mut best: BTreeMap<(String, String), WeightedEdge> = BTreeMap::new();
    for e in edges {
        let e = WeightedEdge::new(&e.a, &e.b, e.score.clamp(0.0, 1.0), e.rationale_text);
        if e.a == e.b {
            return Err(GraphError::SelfLoop(e.a));
        }
        if !ids.contains(e.a.as_str()) || !ids.contains(e.b.as_str()) {
            return Err(GraphError::DanglingEdge { a: e.a, b: e.b });
        }
        let key = (e.a.clone(), e.b.clone());
        match best.get(&key) {
            Some(prev) if prev.score >= e.score => {}
            _ => {
                best.insert(key, e);
            }
        }
    }
    let total = best.len();
    let edges: Vec<WeightedEdge> = best.into_values().filter(|e| e.score >= threshold).collect();
    Ok(EntityGraph {
        n: nodes.len(),
        pruned: total - edges.len(),
        nodes,
        edges,
        threshold,
    })
}

impl EntityGraph {
    /// Neighbours of every node, strongest first, ties by id.
    pub fn ranked_neighbors(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut adj: BTreeMap<&str, Vec<(&str, f64)>> =
            self.nodes.iter().map(|n| (n.entity_id.as_str(), Vec::new())).collect();
        for e in &self.edges {
            adj.entry(e.a.as_str()).or_default().push((e.b.as_str(), e.score));
            adj.entry(e.b.as_str()).or_default().push((e.a.as_str(), e.score));
        }
        for list in adj.values_mut() {
            list.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(y.0)));
        }
        adj
    }

    pub fn node(&self, id: &str) -> Option<&EntityNode> {
        self.nodes
            .binary_search_by(|n| n.entity_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.nodes[i])
    }
}

/// One tuple per center: the center followed by its k-1 strongest neighbours.
/// Member sets already emitted from another center are dropped.
pub fn k_tuples(graph: &EntityGraph, k: usize) -> Result<TupleSet, GraphError> {
    if k < 2 || k > graph.n {
        return Err(GraphError::InvalidK { k, n: graph.n });
    }
    let mut out = TupleSet::default();
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    for (center, neighbors) in graph.ranked_neighbors() {
        if neighbors.len() < k - 1 {
            out.skipped += 1;
            continue;
        }
        let members: Vec<&str> = std::iter::once(center)
            .chain(neighbors[..k - 1].iter().map(|(id, _)| *id))
            .collect();
        let mut key = members.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            out.duplicates += 1;
            continue;
        }
        out.tuples
            .push(EntityTuple::new(members.into_iter().map(str::to_string).collect()));
    }
    Ok(out)
}

/// Pairs in descending order of mention-count product, truncated to `budget`.
/// With `shared_doc_only`, pairs that never share a document are left out.
pub fn pair_schedule_with(nodes: &[EntityNode], budget: usize, shared_doc_only: bool) -> Vec<(String, String)> {
    let mut sorted: Vec<&EntityNode> = nodes.iter().collect();
    sorted.sort_by(|x, y| x.entity_id.cmp(&y.entity_id));
    let mut pairs = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if shared_doc_only && !a.doc_refs.iter().any(|d| b.doc_refs.contains(d)) {
                continue;
            }
            pairs.push((a.mention_count as u128 * b.mention_count as u128, *a, *b));
        }
    }
    pairs.sort_by(|x, y| {
        y.0.cmp(&x.0)
            .then_with(|| x.1.entity_id.cmp(&y.1.entity_id))
            .then_with(|| x.2.entity_id.cmp(&y.2.entity_id))
    });
    pairs
        .into_iter()
        .take(budget)
        .map(|(_, a, b)| (a.entity_id.clone(), b.entity_id.clone()))
        .collect()
}

pub fn pair_schedule(nodes: &[EntityNode], budget: usize) -> Vec<(String, String)> {
    pair_schedule_with(nodes, budget, false)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GraphRecord {
    Graph { threshold: f64, n: usize, pruned: usize },
    Node(EntityNode),
    Edge(WeightedEdge),
}

/// Writes a header line, then one node per line, then one edge per line.
pub fn save_graph(graph: &EntityGraph, path: &Path) -> Result<(), GraphError> {
    let mut records = vec![GraphRecord::Graph {
        threshold: graph.threshold,
        n: graph.n,
        pruned: graph.pruned,
    }];
    records.extend(graph.nodes.iter().cloned().map(GraphRecord::Node));
    records.extend(graph.edges.iter().cloned().map(GraphRecord::Edge));
    Ok(write_jsonl(path, &records)?)
}

pub fn load_graph(path: &Path) -> Result<EntityGraph, GraphError> {
    let mut header = None;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for r in read_jsonl::<GraphRecord>(path)? {
        match r {
            GraphRecord::Graph { threshold, n, pruned } => header = Some((threshold, n, pruned)),
            GraphRecord::Node(n) => nodes.push(n),
            GraphRecord::Edge(e) => edges.push(e),
        }
    }
    let (threshold, n, pruned) = header.ok_or_else(|| GraphError::MalformedGraph("missing header".into()))?;
    if n != nodes.len() {
        return Err(GraphError::MalformedGraph(format!("header says {n} nodes, found {}", nodes.len())));
    }
    Ok(EntityGraph {
        nodes,
        edges,
        threshold,
        n,
        pruned,
    })
}
