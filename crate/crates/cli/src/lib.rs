//! Command-line front end for the encsynth pipeline.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::{Ctx, Inputs};

#[derive(Debug, Parser)]
#[command(name = "encsynth", version, about = "Encrypt PII, synthesize entity-centric training data, audit and evaluate")]
pub struct Cli {
    /// TOML configuration file. Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; each stage writes to <out>/<stage>/.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Chat backend: mock or openai.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// More logging on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect PII spans and export a review file.
    Detect(DetectArgs),
    /// Import a reviewed span file.
    Review(ReviewArgs),
    /// Replace PII spans with deterministic cipher tokens.
    Encrypt(EncryptArgs),
    /// Build the weighted entity graph.
    Graph(GraphArgs),
    /// Select entity tuples from the graph.
    Tuples(TuplesArgs),
    /// Generate and filter synthetic records.
    Synth(SynthArgs),
    /// Decrypt tokens in a corpus.
    Decrypt(DecryptArgs),
    /// Count plaintext PII left in synthetic data.
    AuditLeakage(LeakageArgs),
    /// Classify cipher citations in model responses.
    AuditHallucination(HallucinationArgs),
    /// Retrieval-augmented multiple-choice evaluation.
    RagEval(RagArgs),
    /// Run every stage in order.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CryptoArgs {
    /// Hex-encoded AES key (16 or 32 bytes).
    #[arg(long)]
    pub key_file: Option<PathBuf>,
    /// ecb or siv.
    #[arg(long)]
    pub mode: Option<String>,
    /// Case-fold surfaces before encryption.
    #[arg(long)]
    pub canonical_casefold: bool,
    /// Comma-separated entity types to encrypt (default: all).
    #[arg(long, value_delimiter = ',')]
    pub encrypt_types: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct KeyArgs {
    #[arg(long)]
    pub key_file: Option<PathBuf>,
    /// ecb or siv.
    #[arg(long)]
    pub cipher_mode: Option<String>,
    #[arg(long)]
    pub canonical_casefold: bool,
    #[arg(long, value_delimiter = ',')]
    pub encrypt_types: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// jsonl or dir.
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// Gazetteer for the mock NER sidecar.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    /// mock, stdio, http or none.
    #[arg(long)]
    pub sidecar: Option<String>,
    /// Recognizer pattern file.
    #[arg(long)]
    pub recognizers: Option<PathBuf>,
    #[arg(long)]
    pub canonical_casefold: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReviewArgs {
    /// Edited review file.
    #[arg(long)]
    pub review_file: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EncryptArgs {
    #[command(flatten)]
    pub crypto: CryptoArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub spans: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub pair_budget: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub spans: Option<PathBuf>,
    /// enc-first reads the encrypted corpus, enc-after the plaintext one.
    #[arg(long)]
    pub synth_mode: Option<String>,
    /// Score pairs even when they never share a document.
    #[arg(long)]
    pub all_pairs: bool,
    /// Ask the chat backend for additional entities.
    #[arg(long)]
    pub llm_extract: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TuplesArgs {
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub max_tuples: Option<usize>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// qa or relation.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub budget_tokens: Option<usize>,
    /// enc-first or enc-after.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub avg_record_tokens: Option<usize>,
    #[arg(long)]
    pub tuples: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub filter_rules: Option<PathBuf>,
    #[command(flatten)]
    pub key: KeyArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DecryptArgs {
    #[command(flatten)]
    pub crypto: CryptoArgs,
    /// Corpus to decrypt (default: the synthetic corpus).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LeakageArgs {
    /// Plaintext inventory (JSONL).
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub canonical_casefold: bool,
    #[arg(long)]
    pub recognizers: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HallucinationArgs {
    /// JSONL of {"article_id": ..., "response": ...}.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Metadata key grouping synthetic documents into articles.
    #[arg(long)]
    pub group_key: Option<String>,
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[command(flatten)]
    pub crypto: CryptoArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RagArgs {
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub retrieve_k: Option<usize>,
    /// Evaluate the full chunk-size x top-k grid as well.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub mcq: Option<PathBuf>,
    /// encrypted, synthetic or original.
    #[arg(long)]
    pub index: Option<String>,
    /// Explicit corpus to index.
    #[arg(long)]
    pub index_corpus: Option<PathBuf>,
    /// Comma-separated types encrypted in flagged questions.
    #[arg(long, value_delimiter = ',')]
    pub question_types: Option<Vec<String>>,
    #[command(flatten)]
    pub crypto: CryptoArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub key: KeyArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// enc-first or enc-after.
    #[arg(long)]
    pub synth_mode: Option<String>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub pair_budget: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub max_tuples: Option<usize>,
    #[arg(long)]
    pub budget_tokens: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub group_key: Option<String>,
}

fn abs(cwd: &Path, p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| if p.is_relative() { cwd.join(p) } else { p.clone() })
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
    if value.is_some() {
        *slot = value.clone();
    }
}

fn apply_crypto(cfg: &mut PipelineConfig, cwd: &Path, key_file: &Option<PathBuf>, mode: &Option<String>, casefold: bool, types: &Option<Vec<String>>) {
    set_opt(&mut cfg.crypto.key_file, &abs(cwd, key_file));
    set(&mut cfg.crypto.mode, mode);
    if casefold {
        cfg.crypto.casefold = true;
    }
    set_opt(&mut cfg.crypto.encrypt_types, types);
}

/// Applies command-line overrides and collects explicit input paths.
fn apply_overrides(cli: &Cli, cfg: &mut PipelineConfig, cwd: &Path) -> Inputs {
    let mut io = Inputs::default();
    if let Some(out) = abs(cwd, &cli.out) {
        cfg.paths.output = out;
    }
    set(&mut cfg.backend.kind, &cli.backend);
    match &cli.command {
        Command::Detect(a) => {
            io.corpus = abs(cwd, &a.corpus);
            set(&mut cfg.paths.corpus_format, &a.corpus_format);
            set_opt(&mut cfg.paths.gazetteer, &abs(cwd, &a.gazetteer));
            set(&mut cfg.detect.sidecar, &a.sidecar);
            set_opt(&mut cfg.paths.recognizers, &abs(cwd, &a.recognizers));
            if a.canonical_casefold {
                cfg.crypto.casefold = true;
            }
        }
        Command::Review(a) => {
            io.review = abs(cwd, &a.review_file);
            io.corpus = abs(cwd, &a.corpus);
        }
        Command::Encrypt(a) => {
            let c = &a.crypto;
            apply_crypto(cfg, cwd, &c.key_file, &c.mode, c.canonical_casefold, &c.encrypt_types);
            io.corpus = abs(cwd, &a.corpus);
            io.spans = abs(cwd, &a.spans);
        }
        Command::Graph(a) => {
            set(&mut cfg.graph.threshold, &a.threshold);
            set(&mut cfg.graph.pair_budget, &a.pair_budget);
            set(&mut cfg.synthesis.mode, &a.synth_mode);
            if a.all_pairs {
                cfg.graph.shared_doc_only = false;
            }
            if a.llm_extract {
                cfg.graph.llm_extract = true;
            }
            io.corpus = abs(cwd, &a.corpus);
            io.spans = abs(cwd, &a.spans);
        }
        Command::Tuples(a) => {
            set(&mut cfg.graph.k_max, &a.k_max);
            set_opt(&mut cfg.graph.max_tuples, &a.max_tuples);
            io.graph = abs(cwd, &a.graph);
        }
        Command::Synth(a) => {
            set(&mut cfg.synthesis.kind, &a.kind);
            set(&mut cfg.synthesis.budget_tokens, &a.budget_tokens);
            set(&mut cfg.synthesis.mode, &a.mode);
            set(&mut cfg.synthesis.avg_record_tokens, &a.avg_record_tokens);
            set_opt(&mut cfg.paths.filter_rules, &abs(cwd, &a.filter_rules));
            let k = &a.key;
            apply_crypto(cfg, cwd, &k.key_file, &k.cipher_mode, k.canonical_casefold, &k.encrypt_types);
            io.tuples = abs(cwd, &a.tuples);
            io.graph = abs(cwd, &a.graph);
            io.corpus = abs(cwd, &a.corpus);
        }
        Command::Decrypt(a) => {
            let c = &a.crypto;
            apply_crypto(cfg, cwd, &c.key_file, &c.mode, c.canonical_casefold, &c.encrypt_types);
            io.input = abs(cwd, &a.input);
        }
        Command::AuditLeakage(a) => {
            io.inventory = abs(cwd, &a.inventory);
            io.synthetic = abs(cwd, &a.synthetic);
            set_opt(&mut cfg.paths.recognizers, &abs(cwd, &a.recognizers));
            if a.canonical_casefold {
                cfg.crypto.casefold = true;
            }
        }
        Command::AuditHallucination(a) => {
            let c = &a.crypto;
            apply_crypto(cfg, cwd, &c.key_file, &c.mode, c.canonical_casefold, &c.encrypt_types);
            io.responses = abs(cwd, &a.responses);
            io.synthetic = abs(cwd, &a.synthetic);
            io.group_key = a.group_key.clone();
        }
        Command::RagEval(a) => {
            let c = &a.crypto;
            apply_crypto(cfg, cwd, &c.key_file, &c.mode, c.canonical_casefold, &c.encrypt_types);
            set(&mut cfg.rag.chunk_size, &a.chunk_size);
            set(&mut cfg.rag.top_k, &a.top_k);
            set_opt(&mut cfg.rag.retrieve_k, &a.retrieve_k);
            set(&mut cfg.rag.index, &a.index);
            set_opt(&mut cfg.crypto.question_types, &a.question_types);
            if a.sweep {
                cfg.rag.sweep = true;
            }
            io.mcq = abs(cwd, &a.mcq);
            io.index_corpus = abs(cwd, &a.index_corpus);
        }
        Command::Pipeline(a) => {
            let k = &a.key;
            apply_crypto(cfg, cwd, &k.key_file, &k.cipher_mode, k.canonical_casefold, &k.encrypt_types);
            set_opt(&mut cfg.paths.corpus, &abs(cwd, &a.corpus));
            set(&mut cfg.synthesis.mode, &a.synth_mode);
            set(&mut cfg.synthesis.kind, &a.kind);
            set(&mut cfg.graph.threshold, &a.threshold);
            set(&mut cfg.graph.pair_budget, &a.pair_budget);
            set(&mut cfg.graph.k_max, &a.k_max);
            set_opt(&mut cfg.graph.max_tuples, &a.max_tuples);
            set(&mut cfg.synthesis.budget_tokens, &a.budget_tokens);
            set(&mut cfg.rag.chunk_size, &a.chunk_size);
            set(&mut cfg.rag.top_k, &a.top_k);
            if a.sweep {
                cfg.rag.sweep = true;
            }
            io.group_key = a.group_key.clone();
        }
    }
    io
}

/// Loads the configuration, applies flags and runs the subcommand. Returns
/// the path of the manifest written.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cwd = std::env::current_dir().map_err(|e| CliError::config("cwd", e))?;
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            let p = if p.is_relative() { cwd.join(p) } else { p.clone() };
            let base = p.parent().map(Path::to_path_buf).unwrap_or_else(|| cwd.clone());
            (PipelineConfig::load(&p)?, base)
        }
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.paths.output = cwd.join(&cfg.paths.output);
            (cfg, cwd.clone())
        }
    };
    let io = apply_overrides(cli, &mut cfg, &cwd);
    let ctx = Ctx::new(cfg, base)?;
    match &cli.command {
        Command::Detect(_) => stages::detect(&ctx, &io),
        Command::Review(_) => stages::review(&ctx, &io),
        Command::Encrypt(_) => stages::encrypt(&ctx, &io),
        Command::Graph(_) => stages::graph(&ctx, &io),
        Command::Tuples(_) => stages::tuples(&ctx, &io),
        Command::Synth(_) => stages::synth(&ctx, &io),
        Command::Decrypt(_) => stages::decrypt(&ctx, &io),
        Command::AuditLeakage(_) => stages::audit_leakage(&ctx, &io),
        Command::AuditHallucination(_) => stages::audit_hallucination(&ctx, &io),
        Command::RagEval(_) => stages::rag_eval(&ctx, &io),
        Command::Pipeline(_) => stages::pipeline(&ctx, &io),
    }
}

/// Entry point shared by the binary and the tests: returns the exit code and
/// prints the error report on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(manifest) => {
            println!("{}", serde_json::json!({"ok": true, "manifest": manifest}));
            0
        }
        Err(e) => {
            eprintln!("{}", e.report());
            e.exit_code()
        }
    }
}
