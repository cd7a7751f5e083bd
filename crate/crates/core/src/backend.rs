//! Chat, embedding and rerank backends.
//!
//! The HTTP chat client speaks the OpenAI-compatible `chat/completions`
//! wire format. Every backend also has an offline mock that is a pure
//! function of its input, so pipeline runs against mocks are reproducible
//! byte for byte.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::is_cjk;
use crate::detcrypt::parse_cipher_tokens;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure{}: {detail}", code.map(|c| format!(" (status {c})")).unwrap_or_default())]
    Transport { code: Option<u16>, detail: String },
    #[error("gave up after {retries} retries: {last}")]
    Exhausted { retries: u32, last: String },
    #[error("authentication rejected")]
    AuthFailure,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite embedding component")]
    NonFinite,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Connection failures, 408, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport { code: None, .. } => true,
            BackendError::Transport { code: Some(c), .. } => *c == 408 || *c == 429 || *c >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub sampling: BTreeMap<String, Value>,
    pub tag: String,
}

impl ChatRequest {
    pub fn user(tag: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            sampling: BTreeMap::new(),
            tag: tag.into(),
        }
    }

    pub fn with_sampling(mut self, key: &str, value: Value) -> Self {
        self.sampling.insert(key.to_string(), value);
        self
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages must not be empty".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, expected_dim: usize) -> Result<Self, BackendError> {
        if values.len() != expected_dim {
            return Err(BackendError::DimMismatch {
                expected: expected_dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; 0 when either vector is all zeros.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let na = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

pub trait Reranker: Send + Sync {
    /// One relevance score per chunk, same order as `chunks`.
    fn scores(&self, query: &str, chunks: &[String]) -> Result<Vec<f64>, BackendError>;

    /// Top `top_k` `(index, score)` pairs by descending score; ties keep the
    /// original chunk order.
    fn rerank(
        &self,
        query: &str,
        chunks: &[String],
        top_k: usize,
    ) -> Result<Vec<(usize, f64)>, BackendError> {
        if top_k == 0 {
            return Err(BackendError::InvalidRequest("top_k must be at least 1".into()));
        }
        let scores = self.scores(query, chunks)?;
        if scores.len() != chunks.len() {
            return Err(BackendError::Protocol(format!(
                "{} scores for {} chunks",
                scores.len(),
                chunks.len()
            )));
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked.truncate(top_k);
        Ok(ranked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails permanently, or the retry budget is
    /// spent. Returns the value and the number of attempts made.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
    ) -> Result<(T, u32), BackendError> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok((v, attempt + 1)),
                Err(e) if e.is_transient() => {
                    if attempt >= self.max_retries {
                        return Err(BackendError::Exhausted {
                            retries: self.max_retries,
                            last: e.to_string(),
                        });
                    }
                    let wait = self.delay(attempt);
                    tracing::debug!(attempt, ?wait, error = %e, "retrying backend call");
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Bounds concurrent in-flight requests and, optionally, requests per minute.
pub struct RequestLimiter {
    max_in_flight: usize,
    per_minute: Option<usize>,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

#[derive(Default)]
struct LimiterState {
    in_flight: usize,
    recent: VecDeque<Instant>,
}

pub struct LimiterGuard<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().expect("limiter lock");
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RequestLimiter {
    pub fn new(max_in_flight: usize, per_minute: Option<usize>) -> Self {
        RequestLimiter {
            max_in_flight: max_in_flight.max(1),
            per_minute: per_minute.filter(|n| *n > 0),
            state: Mutex::new(LimiterState::default()),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let window = Duration::from_secs(60);
        let mut state = self.state.lock().expect("limiter lock");
        loop {
            let now = Instant::now();
            while state.recent.front().is_some_and(|t| now.duration_since(*t) >= window) {
                state.recent.pop_front();
            }
            let rate_wait = match self.per_minute {
                Some(limit) if state.recent.len() >= limit => state
                    .recent
                    .front()
                    .map(|t| window.saturating_sub(now.duration_since(*t))),
                _ => None,
            };
            if state.in_flight < self.max_in_flight && rate_wait.is_none() {
                state.in_flight += 1;
                if self.per_minute.is_some() {
                    state.recent.push_back(now);
                }
                return LimiterGuard { limiter: self };
            }
            state = match rate_wait {
                Some(wait) => self.freed.wait_timeout(state, wait).expect("limiter lock").0,
                None => self.freed.wait(state).expect("limiter lock"),
            };
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("limiter lock").in_flight
    }
}

/// Append-only JSONL log of backend exchanges. Secrets registered with the
/// log are replaced by `[REDACTED]` in every string written.
pub struct AuditLog {
    file: Mutex<File>,
    secrets: Vec<String>,
}

impl AuditLog {
    pub fn open(path: &Path, secrets: Vec<String>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            file: Mutex::new(file),
            secrets: secrets.into_iter().filter(|s| !s.is_empty()).collect(),
        })
    }

    pub fn redact(&self, text: &str) -> String {
        self.secrets
            .iter()
            .fold(text.to_string(), |acc, s| acc.replace(s.as_str(), "[REDACTED]"))
    }

    pub fn record(&self, entry: &Value) {
        let line = self.redact(&entry.to_string());
        if let Ok(mut f) = self.file.lock() {
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "audit log write failed");
            }
        }
    }
}

/// Minimal HTTP seam so retry behaviour can be tested without a network.
pub trait HttpTransport: Send + Sync {
    /// POSTs `body` and returns `(status, response body)`. `Err` means the
    /// request never produced an HTTP response.
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<(u16, String), String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        UreqTransport {
            agent: config.into(),
        }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<(u16, String), String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub sampling: BTreeMap<String, Value>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub per_minute: Option<usize>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    120
}

/// Chat client for any OpenAI-compatible `chat/completions` endpoint.
pub struct OpenAiChat {
    config: OpenAiConfig,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: RequestLimiter,
    transport: Box<dyn HttpTransport>,
    audit: Option<AuditLog>,
}

impl OpenAiChat {
    pub fn new(config: OpenAiConfig, api_key: Option<String>) -> Self {
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_secs)));
        Self::with_transport(config, api_key, transport)
    }

    pub fn with_transport(
        config: OpenAiConfig,
        api_key: Option<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        let retry = RetryPolicy {
            max_retries: config.max_retries,
            ..RetryPolicy::default()
        };
        let limiter = RequestLimiter::new(config.max_in_flight, config.per_minute);
        OpenAiChat {
            config,
            api_key: api_key.filter(|k| !k.is_empty()),
            retry,
            limiter,
            transport,
            audit: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_audit_log(mut self, path: &Path) -> std::io::Result<Self> {
        let secrets = self.api_key.iter().cloned().collect();
        self.audit = Some(AuditLog::open(path, secrets)?);
        Ok(self)
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": req.messages,
        });
        let obj = body.as_object_mut().expect("object literal");
        for (k, v) in self.config.sampling.iter().chain(&req.sampling) {
            obj.insert(k.clone(), v.clone());
        }
        body
    }

    fn attempt(&self, url: &str, body: &str) -> Result<String, BackendError> {
        let _slot = self.limiter.acquire();
        let (status, text) = self
            .transport
            .post_json(url, self.api_key.as_deref(), body)
            .map_err(|detail| BackendError::Transport { code: None, detail })?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::AuthFailure),
            code => {
                let detail: String = text.chars().take(200).collect();
                return Err(BackendError::Transport {
                    code: Some(code),
                    detail,
                });
            }
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}

impl ChatBackend for OpenAiChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.body(req).to_string();
        let result = self.retry.run(|_| self.attempt(&url, &body));
        if let Some(log) = &self.audit {
            let (outcome, attempts) = match &result {
                Ok((text, n)) => (json!({ "response": text }), *n),
                Err(e) => (json!({ "error": e.to_string() }), 0),
            };
            log.record(&json!({
                "tag": req.tag,
                "model": self.config.model,
                "request": self.body(req),
                "outcome": outcome,
                "attempts": attempts,
            }));
        }
        result.map(|(text, _)| text)
    }
}

/// Answers from a fixture table keyed by request tag, then by prompt text.
#[derive(Debug, Clone, Default)]
pub struct FixtureChat {
    by_tag: BTreeMap<String, String>,
    by_prompt: BTreeMap<String, String>,
    fallback: Option<String>,
}

impl FixtureChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tag(mut self, tag: &str, response: &str) -> Self {
        self.by_tag.insert(tag.to_string(), response.to_string());
        self
    }

    pub fn prompt(mut self, prompt: &str, response: &str) -> Self {
        self.by_prompt.insert(prompt.to_string(), response.to_string());
        self
    }

    pub fn fallback(mut self, response: &str) -> Self {
        self.fallback = Some(response.to_string());
        self
    }
}

impl ChatBackend for FixtureChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        self.by_tag
            .get(&req.tag)
            .or_else(|| self.by_prompt.get(req.prompt()))
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::Transport {
                code: Some(404),
                detail: format!("no fixture for tag {:?}", req.tag),
            })
    }
}

/// Replays a fixed sequence of results, one per call. Test helper.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(script: Vec<Result<String, BackendError>>) -> Self {
        ScriptedChat {
            script: Mutex::new(script.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("lock").clone()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.seen.lock().expect("lock").push(req.clone());
        self.script
            .lock()
            .expect("lock")
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Protocol("script exhausted".into())))
    }
}

/// Wraps a closure as a chat backend.
pub struct FnChat<F>(pub F);

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        (self.0)(req)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Hash in `[0, 1)` derived from `text`.
pub fn unit_hash(text: &str) -> f64 {
    (fnv1a(text.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64
}

/// Offline embedder: signed feature hashing of character trigrams (with
/// boundary markers), L2-normalised. The empty string maps to the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 64, seed: 17 }
    }
}

impl HashEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if text.is_empty() || self.dim == 0 {
            return out;
        }
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once('\u{3}'))
            .collect();
        let seed = self.seed.to_le_bytes();
        for gram in chars.windows(3.min(chars.len())) {
            let mut buf = seed.to_vec();
            for c in gram {
                let mut tmp = [0u8; 4];
                buf.extend_from_slice(c.encode_utf8(&mut tmp).as_bytes());
            }
            let h = fnv1a(&buf);
            let idx = (h % self.dim as u64) as usize;
            out[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        texts
            .iter()
            .map(|t| EmbeddingVector::new(self.vector(t), self.dim))
            .collect()
    }
}

/// Terms used for overlap scoring: cipher-token renderings stay whole,
/// alphanumeric runs are lowercased, CJK characters stand alone.
pub fn overlap_terms(text: &str) -> BTreeSet<String> {
    let mut terms = BTreeSet::new();
    let mut rest = String::with_capacity(text.len());
    let mut last = 0;
    for m in parse_cipher_tokens(text) {
        terms.insert(text[m.bytes.clone()].to_string());
        rest.push_str(&text[last..m.bytes.start]);
        rest.push(' ');
        last = m.bytes.end;
    }
    rest.push_str(&text[last..]);
    let mut word = String::new();
    for c in rest.chars() {
        if is_cjk(c) && c.is_alphanumeric() {
            if !word.is_empty() {
                terms.insert(std::mem::take(&mut word));
            }
            terms.insert(c.to_string());
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            terms.insert(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        terms.insert(word);
    }
    terms
}

/// Mock reranker scoring each chunk by the number of distinct query terms it
/// contains.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

impl Reranker for OverlapReranker {
    fn scores(&self, query: &str, chunks: &[String]) -> Result<Vec<f64>, BackendError> {
        let q = overlap_terms(query);
        Ok(chunks
            .iter()
            .map(|c| overlap_terms(c).intersection(&q).count() as f64)
            .collect())
    }
}

/// Reranks by cosine similarity under an embedder.
pub struct EmbeddingReranker<E>(pub E);

impl<E: Embedder> Reranker for EmbeddingReranker<E> {
    fn scores(&self, query: &str, chunks: &[String]) -> Result<Vec<f64>, BackendError> {
        if chunks.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.0.embed(&[query.to_string()])?.remove(0);
        Ok(self.0.embed(chunks)?.iter().map(|c| q.cosine(c)).collect())
    }
}

/// Deterministic stand-in for a hosted LLM, used by the demo pipeline.
/// Dispatches on the request tag prefix (`score:`, `synth:`, `extract:`,
/// `mcq:`) and reads what it needs back out of the rendered prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockChat;

fn labelled_line<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

fn section<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
    prompt
        .lines()
        .skip_while(|l| l.trim() != header)
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .collect()
}

impl MockChat {
    fn score(prompt: &str) -> String {
        let e1 = labelled_line(prompt, "E1:").unwrap_or("");
        let e2 = labelled_line(prompt, "E2:").unwrap_or("");
        let article = section(prompt, "Article:").join("\n");
        let together = article
            .split(['\n', '.', '。', '!', '?', '！', '？'])
            .any(|s| !e1.is_empty() && !e2.is_empty() && s.contains(e1) && s.contains(e2));
        let h = unit_hash(&format!("{e1}\u{0}{e2}"));
        let score = if together { 0.55 + 0.4 * h } else { 0.05 + 0.4 * h };
        format!(
            "### Causal Relationship between {e1} and {e2}\nE1 influences E2: {}.\n\n\
             ### Dependency between {e1} and {e2}\nE1 depends on E2: {}.\n\n\
             ### Indirect Association between {e1} and {e2}\nIntermediary Entities: none.\n\n\
             Score: {score:.2}",
            if together { "they appear together" } else { "not stated" },
            if together { "partially" } else { "no" },
        )
    }

    fn synth(tag: &str, prompt: &str) -> String {
        let mut entities: Vec<String> = section(prompt, "Entities:")
            .iter()
            .filter_map(|l| l.trim().strip_prefix("- ").map(str::to_string))
            .collect();
        if entities.is_empty() {
            entities = parse_cipher_tokens(prompt)
                .into_iter()
                .map(|m| prompt[m.bytes].to_string())
                .collect();
        }
        let title = labelled_line(prompt, "Title:").unwrap_or("the article");
        let variant = tag.rsplit(':').next().unwrap_or("0");
        let (head, rest) = entities.split_first().map(|(h, r)| (h.as_str(), r.join(", "))).unwrap_or(("", String::new()));
        if tag.starts_with("synth:qa_pair") {
            format!(
                "Question: In {title}, how is {head} connected to {rest}? (variant {variant})\n\
                 Answer: In {title}, {head} is directly associated with {rest}; the record links them through the same events."
            )
        } else {
            format!(
                "Relation analysis (variant {variant}) for {title}: {head} is associated with {rest}. \
                 The entities {head} and {rest} share context in the source article and depend on the same events."
            )
        }
    }

    fn mcq(prompt: &str) -> String {
        let context = section(prompt, "Context:").join("\n");
        let ctx_terms = overlap_terms(&context);
        let mut best = ('A', usize::MAX, 0usize);
        for (i, label) in ['A', 'B', 'C', 'D'].into_iter().enumerate() {
            if let Some(option) = labelled_line(prompt, &format!("{label}.")) {
                let hits = overlap_terms(option).intersection(&ctx_terms).count();
                if best.1 == usize::MAX || hits > best.2 {
                    best = (label, i, hits);
                }
            }
        }
        format!("Answer: {}", best.0)
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let prompt = req.prompt();
        let tag = req.tag.as_str();
        Ok(if tag.starts_with("score:") {
            Self::score(prompt)
        } else if tag.starts_with("synth:") {
            Self::synth(tag, prompt)
        } else if tag.starts_with("extract:") {
            "NONE".to_string()
        } else if tag.starts_with("mcq:") {
            Self::mcq(prompt)
        } else {
            "OK".to_string()
        })
    }
}
