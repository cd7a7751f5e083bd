//! Client side of the model sidecar protocol.
//!
//! The sidecar is an external process serving NER spans and sentence
//! embeddings. Requests and responses are single JSON objects:
//!
//! ```text
//! {"op":"ner","text":"Alice met Bob","lang":"en"}
//!   -> {"ok":true,"spans":[{"start":0,"end":5,"entity_type":"PERSON","score":0.99}]}
//! {"op":"embed","texts":["a","b"]}
//!   -> {"ok":true,"vectors":[[...],[...]]}
//! {"op":"health"}
//!   -> {"ok":true,"status":{"ner_model":"...","embed_model":"...","dim":384}}
//! ```
//!
//! Over stdio each body is one line (newline-delimited JSON); over HTTP the
//! same body is POSTed to `<base>/v1/op`. Span offsets are codepoints.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, EmbeddingVector, Embedder, HashEmbedder};
use crate::pii::EntityType;

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("sidecar unavailable: {0}")]
    Unavailable(String),
    #[error("sidecar protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("sidecar reported an error: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum SidecarRequest {
    Ner { text: String, lang: String },
    Embed { texts: Vec<String> },
    Health,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSpan {
    pub start: usize,
    pub end: usize,
    #[serde(alias = "label", alias = "type")]
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
    #[serde(default, alias = "score", skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl RawSpan {
    pub fn new(start: usize, end: usize, label: &str) -> Self {
        RawSpan {
            start,
            end,
            entity_type: label.to_string(),
            surface: None,
            confidence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<RawSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SidecarResponse {
    fn ok() -> Self {
        SidecarResponse {
            ok: true,
            spans: None,
            vectors: None,
            status: None,
            error: None,
        }
    }

    fn into_result(self) -> Result<Self, SidecarError> {
        if self.ok {
            Ok(self)
        } else {
            Err(SidecarError::Remote(
                self.error.unwrap_or_else(|| "unspecified".to_string()),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthStatus {
    pub dim: usize,
    pub raw: Value,
}

pub trait SidecarClient: Send + Sync {
    /// Sends one request and returns exactly one response.
    fn call(&self, request: &SidecarRequest) -> Result<SidecarResponse, SidecarError>;

    fn ner(&self, text: &str, lang: &str) -> Result<Vec<RawSpan>, SidecarError> {
        let resp = self
            .call(&SidecarRequest::Ner {
                text: text.to_string(),
                lang: lang.to_string(),
            })?
            .into_result()?;
        resp.spans
            .ok_or_else(|| SidecarError::ProtocolViolation("ner response without spans".into()))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, SidecarError> {
        let resp = self
            .call(&SidecarRequest::Embed {
                texts: texts.to_vec(),
            })?
            .into_result()?;
        let vectors = resp.vectors.ok_or_else(|| {
            SidecarError::ProtocolViolation("embed response without vectors".into())
        })?;
        if vectors.len() != texts.len() {
            return Err(SidecarError::ProtocolViolation(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }

    fn health(&self) -> Result<HealthStatus, SidecarError> {
        let resp = self.call(&SidecarRequest::Health)?.into_result()?;
        let status = resp
            .status
            .ok_or_else(|| SidecarError::ProtocolViolation("health without status".into()))?;
        let dim = status
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or_else(|| SidecarError::ProtocolViolation("health status without dim".into()))?;
        Ok(HealthStatus {
            dim: dim as usize,
            raw: status,
        })
    }
}

fn decode_response(line: &str) -> Result<SidecarResponse, SidecarError> {
    serde_json::from_str(line.trim())
        .map_err(|e| SidecarError::ProtocolViolation(format!("{e}: {}", line.trim())))
}

struct Pipes {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Sidecar running as a child process speaking newline-delimited JSON.
pub struct StdioSidecar {
    child: Mutex<Child>,
    pipes: Mutex<Pipes>,
}

impl StdioSidecar {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, SidecarError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SidecarError::Unavailable(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioSidecar {
            child: Mutex::new(child),
            pipes: Mutex::new(Pipes { stdin, stdout }),
        })
    }
}

impl SidecarClient for StdioSidecar {
    fn call(&self, request: &SidecarRequest) -> Result<SidecarResponse, SidecarError> {
        let body = serde_json::to_string(request).expect("requests serialize");
        let mut pipes = self.pipes.lock().expect("sidecar pipe lock");
        writeln!(pipes.stdin, "{body}")
            .and_then(|_| pipes.stdin.flush())
            .map_err(|e| SidecarError::Unavailable(e.to_string()))?;
        let mut line = String::new();
        let n = pipes
            .stdout
            .read_line(&mut line)
            .map_err(|e| SidecarError::Unavailable(e.to_string()))?;
        if n == 0 {
            return Err(SidecarError::Unavailable("sidecar closed its stdout".into()));
        }
        decode_response(&line)
    }
}

impl Drop for StdioSidecar {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Sidecar reachable over HTTP at `<base_url>/v1/op`.
pub struct HttpSidecar {
    url: String,
    agent: ureq::Agent,
}

impl HttpSidecar {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpSidecar {
            url: format!("{}/v1/op", base_url.trim_end_matches('/')),
            agent: config.into(),
        }
    }
}

impl SidecarClient for HttpSidecar {
    fn call(&self, request: &SidecarRequest) -> Result<SidecarResponse, SidecarError> {
        let body = serde_json::to_string(request).expect("requests serialize");
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| SidecarError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| SidecarError::Unavailable(e.to_string()))?;
        if !(200..300).contains(&status) && text.trim().is_empty() {
            return Err(SidecarError::Unavailable(format!("http status {status}")));
        }
        decode_response(&text)
    }
}

/// In-process stand-in for the sidecar. NER either returns a fixed span list
/// or looks up a gazetteer; embeddings come from [`HashEmbedder`].
pub struct MockSidecar {
    fixed: Option<Vec<RawSpan>>,
    gazetteer: Vec<(String, EntityType)>,
    embedder: HashEmbedder,
}

impl MockSidecar {
    pub fn with_spans(spans: Vec<RawSpan>) -> Self {
        MockSidecar {
            fixed: Some(spans),
            gazetteer: Vec::new(),
            embedder: HashEmbedder::default(),
        }
    }

    pub fn with_gazetteer(entries: Vec<(String, EntityType)>) -> Self {
        let mut gazetteer: Vec<_> = entries.into_iter().filter(|(s, _)| !s.is_empty()).collect();
        // Longest entries first so "Alice Smith" wins over "Alice".
        gazetteer.sort_by(|a, b| {
            b.0.chars()
                .count()
                .cmp(&a.0.chars().count())
                .then_with(|| a.0.cmp(&b.0))
        });
        gazetteer.dedup_by(|a, b| a.0 == b.0);
        MockSidecar {
            fixed: None,
            gazetteer,
            embedder: HashEmbedder::default(),
        }
    }

    /// Loads `{"PERSON": ["Alice", ...], "LOCATION": [...]}`.
    pub fn from_gazetteer_file(path: &Path) -> Result<Self, SidecarError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SidecarError::Unavailable(format!("{}: {e}", path.display())))?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| SidecarError::ProtocolViolation(format!("gazetteer: {e}")))?;
        let entries = raw
            .into_iter()
            .flat_map(|(t, names)| {
                let t = EntityType::from_label(&t);
                names.into_iter().map(move |n| (n, t))
            })
            .collect();
        Ok(Self::with_gazetteer(entries))
    }

    fn lookup(&self, text: &str) -> Vec<RawSpan> {
        let chars: Vec<char> = text.chars().collect();
        let mut taken = vec![false; chars.len()];
        let mut spans = Vec::new();
        for (surface, entity_type) in &self.gazetteer {
            let needle: Vec<char> = surface.chars().collect();
            let mut i = 0;
            while i + needle.len() <= chars.len() {
                if chars[i..i + needle.len()] == needle[..] && !taken[i..i + needle.len()].contains(&true) {
                    taken[i..i + needle.len()].iter_mut().for_each(|t| *t = true);
                    spans.push(RawSpan {
                        start: i,
                        end: i + needle.len(),
                        entity_type: entity_type.as_str().to_string(),
                        surface: Some(surface.clone()),
                        confidence: Some(1.0),
                    });
                    i += needle.len();
                } else {
                    i += 1;
                }
            }
        }
        spans.sort_by_key(|s| s.start);
        spans
    }
}

impl SidecarClient for MockSidecar {
    fn call(&self, request: &SidecarRequest) -> Result<SidecarResponse, SidecarError> {
        let mut resp = SidecarResponse::ok();
        match request {
            SidecarRequest::Ner { text, .. } => {
                resp.spans = Some(match &self.fixed {
                    Some(spans) => spans.clone(),
                    None => self.lookup(text),
                });
            }
            SidecarRequest::Embed { texts } => {
                let vectors = self
                    .embedder
                    .embed(texts)
                    .map_err(|e| SidecarError::Remote(e.to_string()))?;
                resp.vectors = Some(vectors.into_iter().map(|v| v.values).collect());
            }
            SidecarRequest::Health => {
                resp.status = Some(serde_json::json!({
                    "ner_model": if self.fixed.is_some() { "mock-fixed" } else { "mock-gazetteer" },
                    "embed_model": "mock-hash",
                    "dim": self.embedder.dim(),
                }));
            }
        }
        Ok(resp)
    }
}

/// Embedder backed by a sidecar's `embed` op. The dimension is read from
/// `health` once and enforced on every response.
pub struct SidecarEmbedder<C> {
    client: C,
    dim: usize,
}

impl<C: SidecarClient> SidecarEmbedder<C> {
    pub fn connect(client: C) -> Result<Self, SidecarError> {
        let dim = client.health()?.dim;
        Ok(SidecarEmbedder { client, dim })
    }
}

impl<C: SidecarClient> Embedder for SidecarEmbedder<C> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let raw = self
            .client
            .embed(texts)
            .map_err(|e| BackendError::Transport {
                code: None,
                detail: e.to_string(),
            })?;
        raw.into_iter()
            .map(|values| EmbeddingVector::new(values, self.dim))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        assert_eq!(
            serde_json::to_string(&SidecarRequest::Health).unwrap(),
            r#"{"op":"health"}"#
        );
        assert_eq!(
            serde_json::to_string(&SidecarRequest::Ner {
                text: "Alice met Bob".into(),
                lang: "en".into()
            })
            .unwrap(),
            r#"{"op":"ner","text":"Alice met Bob","lang":"en"}"#
        );
    }

    #[test]
    fn response_accepts_label_aliases() {
        let r = decode_response(
            r#"{"ok":true,"spans":[{"start":0,"end":5,"label":"PER","score":0.5}]}"#,
        )
        .unwrap();
        let s = &r.spans.unwrap()[0];
        assert_eq!(s.entity_type, "PER");
        assert_eq!(s.confidence, Some(0.5));
        assert!(matches!(decode_response("nope"), Err(SidecarError::ProtocolViolation(_))));
    }

    #[test]
    fn remote_error_surfaces() {
        struct Failing;
        impl SidecarClient for Failing {
            fn call(&self, _: &SidecarRequest) -> Result<SidecarResponse, SidecarError> {
                decode_response(r#"{"ok":false,"error":"model not loaded"}"#)
            }
        }
        assert!(matches!(Failing.ner("x", "en"), Err(SidecarError::Remote(m)) if m == "model not loaded"));
    }

    #[test]
    fn gazetteer_offsets() {
        let mock = MockSidecar::with_gazetteer(vec![
            ("Alice".into(), EntityType::Person),
            ("Bob".into(), EntityType::Person),
        ]);
        let spans = mock.ner("Alice met Bob", "en").unwrap();
        let offsets: Vec<_> = spans.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(offsets, [(0, 5), (10, 13)]);
        assert!(spans.iter().all(|s| s.entity_type == "PERSON"));
    }

    #[test]
    fn gazetteer_prefers_longest_and_counts_codepoints() {
        let mock = MockSidecar::with_gazetteer(vec![
            ("张三".into(), EntityType::Person),
            ("张三丰".into(), EntityType::Person),
            ("北京".into(), EntityType::Location),
        ]);
        let spans = mock.ner("张三丰在北京，张三也在", "zh").unwrap();
        let got: Vec<_> = spans.iter().map(|s| (s.start, s.end, s.surface.clone().unwrap())).collect();
        assert_eq!(
            got,
            [
                (0, 3, "张三丰".to_string()),
                (4, 6, "北京".to_string()),
                (7, 9, "张三".to_string())
            ]
        );
    }

    #[test]
    fn mock_health_and_embed() {
        let mock = MockSidecar::with_spans(vec![]);
        let h = mock.health().unwrap();
        assert_eq!(h.dim, HashEmbedder::default().dim());
        let v = mock.embed(&["a".to_string(), "a".to_string()]).unwrap();
        assert_eq!(v[0], v[1]);
        let emb = SidecarEmbedder::connect(mock).unwrap();
        assert_eq!(emb.embed(&["x".into()]).unwrap()[0].dim(), h.dim);
    }
}
