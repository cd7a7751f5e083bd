use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{stage_msg, CliError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File digest; directories hash the sorted list of (relative path, digest).
pub fn sha256_path(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        for e in entries {
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(name.as_bytes());
            h.update([0]);
            h.update(sha256_path(&e)?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_bytes(&fs::read(path)?))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Shared facts every stage manifest repeats.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub out_root: PathBuf,
    pub config_base: PathBuf,
    pub config: Value,
    pub config_sha256: String,
    pub prompt_version: String,
}

impl RunInfo {
    pub fn new(out_root: PathBuf, config_base: PathBuf, config: Value, prompt_version: String) -> Self {
        let config_sha256 = sha256_bytes(config.to_string().as_bytes());
        RunInfo {
            out_root,
            config_base,
            config,
            config_sha256,
            prompt_version,
        }
    }

    /// Path as recorded in a manifest: relative to the output root or the
    /// config directory when it lies inside one of them.
    pub fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_root)
            .or_else(|_| p.strip_prefix(&self.config_base))
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// One stage execution: owns `<out>/<stage>/` and records what it read and
/// wrote.
pub struct StageRun<'a> {
    pub info: &'a RunInfo,
    pub stage: &'static str,
    pub dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    flags: Map<String, Value>,
    summary: Map<String, Value>,
}

impl<'a> StageRun<'a> {
    /// Creates (or empties) the stage directory.
    pub fn start(info: &'a RunInfo, stage: &'static str) -> Result<Self, CliError> {
        let dir = info.out_root.join(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| stage_msg(stage, format!("clearing {}: {e}", dir.display())))?;
        }
        fs::create_dir_all(&dir).map_err(|e| stage_msg(stage, format!("creating {}: {e}", dir.display())))?;
        Ok(StageRun {
            info,
            stage,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            flags: Map::new(),
            summary: Map::new(),
        })
    }

    pub fn input(&mut self, p: &Path) -> PathBuf {
        if !self.inputs.iter().any(|x| x == p) {
            self.inputs.push(p.to_path_buf());
        }
        p.to_path_buf()
    }

    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    pub fn flag(&mut self, key: &str, value: impl Serialize) {
        self.flags.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let p = self.output(name);
        write_json(&p, value).map_err(|e| stage_msg(self.stage, format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn fail(&self, cause: impl std::fmt::Display) -> CliError {
        stage_msg(self.stage, cause)
    }

    /// Hashes inputs and outputs and writes `manifest.json`. Returns its path.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let hashed = |paths: &[PathBuf]| -> Result<Vec<Value>, CliError> {
            paths
                .iter()
                .map(|p| {
                    let digest = sha256_path(p).map_err(|e| stage_msg(self.stage, format!("{}: {e}", p.display())))?;
                    Ok(json!({ "path": self.info.display_path(p), "sha256": digest }))
                })
                .collect()
        };
        let manifest = json!({
            "tool": "encsynth",
            "version": TOOL_VERSION,
            "stage": self.stage,
            "prompt_version": self.info.prompt_version,
            "config_sha256": self.info.config_sha256,
            "config": self.info.config,
            "flags": self.flags,
            "inputs": hashed(&self.inputs)?,
            "outputs": hashed(&self.outputs)?,
            "summary": self.summary,
        });
        let path = self.dir.join("manifest.json");
        write_json(&path, &manifest).map_err(|e| stage_msg(self.stage, e))?;
        Ok(path)
    }
}
