use std::error::Error as StdError;
use std::fmt;

use encsynth_core::backend::BackendError;
use encsynth_core::graph::GraphError;
use encsynth_core::rag::RagError;
use encsynth_core::synthesis::SynthError;
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    ConfigInvalid { field: String, detail: String },
    StageFailure { stage: String, cause: String },
    /// A backend kept failing after its retry budget was spent.
    BackendExhausted { stage: String, cause: String },
}

impl CliError {
    pub fn config(field: impl Into<String>, detail: impl fmt::Display) -> Self {
        CliError::ConfigInvalid {
            field: field.into(),
            detail: detail.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } => 2,
            CliError::StageFailure { .. } => 3,
            CliError::BackendExhausted { .. } => 4,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn report(&self) -> Value {
        match self {
            CliError::ConfigInvalid { field, detail } => json!({
                "error": "config_invalid", "field": field, "detail": detail, "exit_code": 2,
            }),
            CliError::StageFailure { stage, cause } => json!({
                "error": "stage_failure", "stage": stage, "cause": cause, "exit_code": 3,
            }),
            CliError::BackendExhausted { stage, cause } => json!({
                "error": "backend_exhausted", "stage": stage, "cause": cause, "exit_code": 4,
            }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::ConfigInvalid { field, detail } => write!(f, "invalid config field {field}: {detail}"),
            CliError::StageFailure { stage, cause } => write!(f, "stage {stage} failed: {cause}"),
            CliError::BackendExhausted { stage, cause } => write!(f, "stage {stage}: backend exhausted: {cause}"),
        }
    }
}

impl StdError for CliError {}

fn backend_of<'a>(e: &'a (dyn StdError + 'static)) -> Option<&'a BackendError> {
    if let Some(b) = e.downcast_ref::<BackendError>() {
        return Some(b);
    }
    if let Some(RagError::Backend(b)) = e.downcast_ref::<RagError>() {
        return Some(b);
    }
    if let Some(GraphError::Backend { source, .. }) = e.downcast_ref::<GraphError>() {
        return Some(source);
    }
    if let Some(SynthError::Backend { source, .. }) = e.downcast_ref::<SynthError>() {
        return Some(source);
    }
    None
}

/// Wraps a stage error, promoting exhausted backends to their own exit code.
pub fn stage_failure(stage: &str, err: impl StdError + 'static) -> CliError {
    let mut cur: Option<&(dyn StdError + 'static)> = Some(&err);
    while let Some(e) = cur {
        if let Some(BackendError::Exhausted { .. }) = backend_of(e) {
            return CliError::BackendExhausted {
                stage: stage.to_string(),
                cause: err.to_string(),
            };
        }
        cur = e.source();
    }
    CliError::StageFailure {
        stage: stage.to_string(),
        cause: err.to_string(),
    }
}

pub fn stage_msg(stage: &str, cause: impl fmt::Display) -> CliError {
    CliError::StageFailure {
        stage: stage.to_string(),
        cause: cause.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_and_reports() {
        let c = CliError::config("crypto.key_file", "missing");
        assert_eq!(c.exit_code(), 2);
        assert_eq!(c.report()["field"], "crypto.key_file");
        let e = stage_failure(
            "graph",
            GraphError::Backend {
                stage: "score a / b".into(),
                source: BackendError::Exhausted {
                    retries: 3,
                    last: "503".into(),
                },
            },
        );
        assert_eq!(e.exit_code(), 4);
        let e = stage_failure("rag-eval", RagError::Backend(BackendError::AuthFailure));
        assert_eq!(e.exit_code(), 3);
        let e = stage_failure("rag-eval", RagError::Backend(BackendError::Exhausted { retries: 1, last: "x".into() }));
        assert_eq!(e.exit_code(), 4);
    }
}
