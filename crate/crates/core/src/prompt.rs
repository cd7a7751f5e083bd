//! Prompt templates with `{{name}}` placeholders.
//!
//! Built-in templates live under `assets/prompts/`; a directory holding files
//! of the same names overrides them one by one.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSet {
    pub association: String,
    pub extract: String,
    pub qa_pair: String,
    pub relation_analysis: String,
    pub mcq: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            association: include_str!("../assets/prompts/association.txt").to_string(),
            extract: include_str!("../assets/prompts/extract.txt").to_string(),
            qa_pair: include_str!("../assets/prompts/qa_pair.txt").to_string(),
            relation_analysis: include_str!("../assets/prompts/relation_analysis.txt").to_string(),
            mcq: include_str!("../assets/prompts/mcq.txt").to_string(),
        }
    }
}

impl PromptSet {
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = PromptSet::default();
        let slots: [(&str, &mut String); 5] = [
            ("association.txt", &mut set.association),
            ("extract.txt", &mut set.extract),
            ("qa_pair.txt", &mut set.qa_pair),
            ("relation_analysis.txt", &mut set.relation_analysis),
            ("mcq.txt", &mut set.mcq),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }

    /// Short content hash, recorded in manifests.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.association, &self.extract, &self.qa_pair, &self.relation_analysis, &self.mcq] {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..6])
    }
}

/// Substitutes each `{{name}}`. Unknown placeholders are left as they are.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (name, value)| {
        acc.replace(&format!("{{{{{name}}}}}"), value)
    })
}

/// Drops blank lines so a block of context stays contiguous inside a prompt.
pub fn compact(text: &str) -> String {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// `- item` lines.
pub fn bullet_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|s| format!("- {}", s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}
