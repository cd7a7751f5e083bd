//! Pipeline configuration: a TOML file with `${VAR}` interpolation, relative
//! paths resolved against the file's directory, and command-line overrides
//! applied on top.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use encsynth_core::detcrypt::CipherMode;
use encsynth_core::pii::EntityType;
use encsynth_core::synthesis::SynthKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub crypto: CryptoConfig,
    pub detect: DetectConfig,
    pub graph: GraphConfig,
    pub synthesis: SynthConfig,
    pub backend: BackendConfig,
    pub rag: RagSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    /// `jsonl` or `dir` (one plain-text file per document).
    pub corpus_format: String,
    pub output: PathBuf,
    pub prompts: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub recognizers: Option<PathBuf>,
    pub review: Option<PathBuf>,
    pub filter_rules: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub mcq: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: None,
            corpus_format: "jsonl".into(),
            output: PathBuf::from("out"),
            prompts: None,
            gazetteer: None,
            recognizers: None,
            review: None,
            filter_rules: None,
            responses: None,
            mcq: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CryptoConfig {
    pub key_file: Option<PathBuf>,
    pub mode: String,
    pub casefold: bool,
    /// Types replaced by tokens; all types when absent.
    pub encrypt_types: Option<Vec<String>>,
    /// Types encrypted in evaluation questions; defaults to `encrypt_types`.
    pub question_types: Option<Vec<String>>,
}

impl Default for CryptoConfig {
    fn default() -> Self {
        CryptoConfig {
            key_file: None,
            mode: "ecb".into(),
            casefold: false,
            encrypt_types: None,
            question_types: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// `mock` (gazetteer), `stdio`, `http` or `none`.
    pub sidecar: String,
    pub sidecar_command: Vec<String>,
    pub sidecar_url: Option<String>,
    pub sidecar_timeout_secs: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            sidecar: "mock".into(),
            sidecar_command: Vec::new(),
            sidecar_url: None,
            sidecar_timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub threshold: f64,
    pub pair_budget: usize,
    pub k_max: usize,
    pub max_tuples: Option<usize>,
    /// Only score pairs that co-occur in at least one document.
    pub shared_doc_only: bool,
    /// Ask the chat backend for entities the detectors missed.
    pub llm_extract: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            threshold: 0.5,
            pair_budget: 200,
            k_max: 4,
            max_tuples: None,
            shared_doc_only: true,
            llm_extract: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub budget_tokens: usize,
    /// `enc-first` or `enc-after`.
    pub mode: String,
    pub kind: String,
    pub avg_record_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            budget_tokens: 20_000,
            mode: "enc-first".into(),
            kind: "qa".into(),
            avg_record_tokens: encsynth_core::synthesis::DEFAULT_AVG_RECORD_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `mock` or `openai`.
    pub kind: String,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub sampling: BTreeMap<String, Value>,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub per_minute: Option<usize>,
    pub timeout_secs: u64,
    /// `hash` or `sidecar`.
    pub embedder: String,
    /// `overlap` or `embedding`.
    pub reranker: String,
    /// Write a redacted request log next to each stage's outputs.
    pub audit_log: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "mock".into(),
            base_url: None,
            api_key: None,
            model: None,
            sampling: BTreeMap::new(),
            max_retries: 3,
            max_in_flight: 4,
            per_minute: None,
            timeout_secs: 120,
            embedder: "hash".into(),
            reranker: "overlap".into(),
            audit_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagSettings {
    pub chunk_size: usize,
    pub top_k: usize,
    pub retrieve_k: Option<usize>,
    pub sweep: bool,
    pub sweep_chunk_sizes: Vec<usize>,
    pub sweep_top_ks: Vec<usize>,
    /// Corpus to index: `encrypted`, `synthetic` or `original`.
    pub index: String,
}

impl Default for RagSettings {
    fn default() -> Self {
        RagSettings {
            chunk_size: 128,
            top_k: 4,
            retrieve_k: None,
            sweep: false,
            sweep_chunk_sizes: vec![128, 1024],
            sweep_top_ks: vec![2, 4, 8, 16],
            index: "encrypted".into(),
        }
    }
}

/// Replaces `${NAME}` with the environment variable; `$${` escapes a literal.
pub fn interpolate(text: &str, field: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(after) = tail.strip_prefix("$${") {
            out.push_str("${");
            rest = after;
        } else if let Some(after) = tail.strip_prefix("${") {
            let end = after
                .find('}')
                .ok_or_else(|| CliError::config(field, "unterminated ${"))?;
            let name = &after[..end];
            let value = env(name).ok_or_else(|| CliError::config(field, format!("environment variable {name} is not set")))?;
            out.push_str(&value);
            rest = &after[end + 1..];
        } else {
            out.push('$');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut toml::Value, field: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<(), CliError> {
    match v {
        toml::Value::String(s) => *s = interpolate(s, field, env)?,
        toml::Value::Array(items) => {
            for (i, item) in items.iter_mut().enumerate() {
                interpolate_value(item, &format!("{field}[{i}]"), env)?;
            }
        }
        toml::Value::Table(t) => {
            for (k, item) in t.iter_mut() {
                let sub = if field.is_empty() { k.clone() } else { format!("{field}.{k}") };
                interpolate_value(item, &sub, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path, env: &dyn Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let mut raw: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| CliError::config("config", e.message()))?;
        interpolate_value(&mut raw, "", env)?;
        let mut cfg: PipelineConfig = raw.try_into().map_err(|e: toml::de::Error| {
            let field = unknown_field(e.message()).unwrap_or_else(|| "config".to_string());
            CliError::config(field, e.message())
        })?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, &|name| std::env::var(name).ok())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.corpus,
            &mut p.prompts,
            &mut p.gazetteer,
            &mut p.recognizers,
            &mut p.review,
            &mut p.filter_rules,
            &mut p.responses,
            &mut p.mcq,
            &mut self.crypto.key_file,
        ] {
            resolve(base, slot);
        }
        if p.output.is_relative() {
            p.output = base.join(&p.output);
        }
        if self.detect.sidecar == "stdio" {
            // a relative script argument is taken relative to the config too
            for arg in self.detect.sidecar_command.iter_mut().skip(1) {
                let candidate = base.join(&*arg);
                if !Path::new(arg.as_str()).is_absolute() && candidate.exists() {
                    *arg = candidate.to_string_lossy().into_owned();
                }
            }
        }
    }

    /// Range and enum checks that need no file system access.
    pub fn validate(&self) -> Result<(), CliError> {
        self.cipher_mode()?;
        self.synth_kind()?;
        self.encrypt_types()?;
        self.question_types()?;
        if !["enc-first", "enc-after"].contains(&self.synthesis.mode.as_str()) {
            return Err(CliError::config("synthesis.mode", "expected enc-first or enc-after"));
        }
        if !["jsonl", "dir"].contains(&self.paths.corpus_format.as_str()) {
            return Err(CliError::config("paths.corpus_format", "expected jsonl or dir"));
        }
        if !["mock", "stdio", "http", "none"].contains(&self.detect.sidecar.as_str()) {
            return Err(CliError::config("detect.sidecar", "expected mock, stdio, http or none"));
        }
        if !["mock", "openai"].contains(&self.backend.kind.as_str()) {
            return Err(CliError::config("backend.kind", "expected mock or openai"));
        }
        if !["hash", "sidecar"].contains(&self.backend.embedder.as_str()) {
            return Err(CliError::config("backend.embedder", "expected hash or sidecar"));
        }
        if !["overlap", "embedding"].contains(&self.backend.reranker.as_str()) {
            return Err(CliError::config("backend.reranker", "expected overlap or embedding"));
        }
        if !["encrypted", "synthetic", "original"].contains(&self.rag.index.as_str()) {
            return Err(CliError::config("rag.index", "expected encrypted, synthetic or original"));
        }
        if !(0.0..=1.0).contains(&self.graph.threshold) {
            return Err(CliError::config("graph.threshold", "must lie in [0, 1]"));
        }
        if self.graph.pair_budget == 0 {
            return Err(CliError::config("graph.pair_budget", "must be positive"));
        }
        if self.graph.k_max < 2 {
            return Err(CliError::config("graph.k_max", "must be at least 2"));
        }
        if self.graph.max_tuples == Some(0) {
            return Err(CliError::config("graph.max_tuples", "must be positive"));
        }
        if self.synthesis.budget_tokens == 0 {
            return Err(CliError::config("synthesis.budget_tokens", "must be positive"));
        }
        if self.synthesis.avg_record_tokens == 0 {
            return Err(CliError::config("synthesis.avg_record_tokens", "must be positive"));
        }
        if self.backend.max_in_flight == 0 {
            return Err(CliError::config("backend.max_in_flight", "must be positive"));
        }
        for (field, sizes) in [
            ("rag.chunk_size", vec![self.rag.chunk_size]),
            ("rag.sweep_chunk_sizes", self.rag.sweep_chunk_sizes.clone()),
        ] {
            if sizes.is_empty() || sizes.iter().any(|&s| s < encsynth_core::rag::MIN_CHUNK_SIZE) {
                return Err(CliError::config(field, "chunk sizes must be at least 16"));
            }
        }
        for (field, ks) in [("rag.top_k", vec![self.rag.top_k]), ("rag.sweep_top_ks", self.rag.sweep_top_ks.clone())] {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::config(field, "must be positive"));
            }
        }
        if let Some(rk) = self.rag.retrieve_k {
            if rk < self.rag.top_k {
                return Err(CliError::config("rag.retrieve_k", "must be at least top_k"));
            }
        }
        Ok(())
    }

    pub fn cipher_mode(&self) -> Result<CipherMode, CliError> {
        self.crypto.mode.parse().map_err(|e| CliError::config("crypto.mode", e))
    }

    pub fn synth_kind(&self) -> Result<SynthKind, CliError> {
        self.synthesis.kind.parse().map_err(|e| CliError::config("synthesis.kind", e))
    }

    fn type_set(field: &str, list: Option<&Vec<String>>) -> Result<BTreeSet<EntityType>, CliError> {
        match list {
            None => Ok(EntityType::ALL.into_iter().collect()),
            Some(names) => names
                .iter()
                .map(|n| n.parse::<EntityType>().map_err(|e| CliError::config(field, e)))
                .collect(),
        }
    }

    pub fn encrypt_types(&self) -> Result<BTreeSet<EntityType>, CliError> {
        Self::type_set("crypto.encrypt_types", self.crypto.encrypt_types.as_ref())
    }

    pub fn question_types(&self) -> Result<BTreeSet<EntityType>, CliError> {
        match &self.crypto.question_types {
            Some(list) => Self::type_set("crypto.question_types", Some(list)),
            None => self.encrypt_types(),
        }
    }

    /// A path that must exist for the current stage.
    pub fn require<'a>(&self, field: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        let p = path
            .as_deref()
            .ok_or_else(|| CliError::config(field, "not set"))?;
        if !p.exists() {
            return Err(CliError::config(field, format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn key_file(&self) -> Result<&Path, CliError> {
        self.require("crypto.key_file", &self.crypto.key_file)
    }

    pub fn enc_first(&self) -> bool {
        self.synthesis.mode == "enc-first"
    }

    /// Effective configuration as recorded in manifests: paths relative to
    /// `base` where possible, the output directory left out and secrets
    /// masked.
    pub fn manifest_view(&self, base: &Path) -> Value {
        let mut c = self.clone();
        let rel = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if let Ok(r) = path.strip_prefix(base) {
                    *path = r.to_path_buf();
                }
            }
        };
        for slot in [
            &mut c.paths.corpus,
            &mut c.paths.prompts,
            &mut c.paths.gazetteer,
            &mut c.paths.recognizers,
            &mut c.paths.review,
            &mut c.paths.filter_rules,
            &mut c.paths.responses,
            &mut c.paths.mcq,
            &mut c.crypto.key_file,
        ] {
            rel(slot);
        }
        for arg in c.detect.sidecar_command.iter_mut() {
            if let Ok(r) = Path::new(arg.as_str()).strip_prefix(base) {
                *arg = r.to_string_lossy().into_owned();
            }
        }
        c.paths.output = PathBuf::new();
        if c.backend.api_key.as_deref().is_some_and(|k| !k.is_empty()) {
            c.backend.api_key = Some("<redacted>".into());
        }
        let mut v = serde_json::to_value(&c).expect("config serializes");
        if let Some(paths) = v.get_mut("paths").and_then(Value::as_object_mut) {
            paths.remove("output");
        }
        v
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> Option<String> {
        match name {
            "API_KEY" => Some("sk-123".into()),
            "HOST" => Some("example.test".into()),
            _ => None,
        }
    }

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate("https://${HOST}/v1", "f", &env).unwrap(), "https://example.test/v1");
        assert_eq!(interpolate("cost $5 $${HOST}", "f", &env).unwrap(), "cost $5 ${HOST}");
        let e = interpolate("${MISSING}", "backend.api_key", &env).unwrap_err();
        assert!(matches!(e, CliError::ConfigInvalid { ref field, .. } if field == "backend.api_key"));
        assert!(interpolate("${HOST", "f", &env).is_err());
    }

    #[test]
    fn parse_resolves_paths_and_secrets() {
        let text = r#"
            [paths]
            corpus = "corpus.jsonl"
            output = "/tmp/abs-out"
            [crypto]
            key_file = "keys/key.hex"
            [backend]
            kind = "openai"
            base_url = "https://${HOST}/v1"
            api_key = "${API_KEY}"
            sampling = { temperature = 0.7 }
        "#;
        let cfg = PipelineConfig::parse(text, Path::new("/base"), &env).unwrap();
        assert_eq!(cfg.paths.corpus.as_deref(), Some(Path::new("/base/corpus.jsonl")));
        assert_eq!(cfg.paths.output, Path::new("/tmp/abs-out"));
        assert_eq!(cfg.backend.api_key.as_deref(), Some("sk-123"));
        assert_eq!(cfg.backend.sampling["temperature"], 0.7);
        let view = cfg.manifest_view(Path::new("/base"));
        assert_eq!(view["crypto"]["key_file"], "keys/key.hex");
        assert_eq!(view["backend"]["api_key"], "<redacted>");
        assert!(view["paths"].get("output").is_none());
        assert!(!view.to_string().contains("sk-123"));
    }

    #[test]
    fn unknown_keys_and_ranges_are_rejected() {
        let e = PipelineConfig::parse("[graph]\nthreshhold = 0.5\n", Path::new("/"), &env).unwrap_err();
        assert!(matches!(e, CliError::ConfigInvalid { ref field, .. } if field == "threshhold"), "{e:?}");
        let mut cfg = PipelineConfig::default();
        cfg.graph.threshold = 1.5;
        assert!(matches!(cfg.validate(), Err(CliError::ConfigInvalid { field, .. }) if field == "graph.threshold"));
        let mut cfg = PipelineConfig::default();
        cfg.crypto.encrypt_types = Some(vec!["PERSON".into(), "NOPE".into()]);
        assert!(matches!(cfg.validate(), Err(CliError::ConfigInvalid { field, .. }) if field == "crypto.encrypt_types"));
        let mut cfg = PipelineConfig::default();
        cfg.rag.chunk_size = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_key_file_names_the_field() {
        let mut cfg = PipelineConfig::default();
        cfg.crypto.key_file = Some(PathBuf::from("/definitely/not/here.hex"));
        assert!(matches!(cfg.key_file(), Err(CliError::ConfigInvalid { field, .. }) if field == "crypto.key_file"));
        cfg.crypto.key_file = None;
        assert!(matches!(cfg.key_file(), Err(CliError::ConfigInvalid { field, .. }) if field == "crypto.key_file"));
    }
}
