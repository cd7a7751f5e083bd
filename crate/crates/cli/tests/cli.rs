use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo").join(name)
}

fn encsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encsynth")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

/// Writes a config next to copies of the demo inputs.
fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for f in ["corpus.jsonl", "gazetteer.json", "key.hex", "mcq.jsonl"] {
        fs::copy(demo(f), dir.path().join(f)).unwrap();
    }
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("[paths]\ncorpus = \"corpus.jsonl\"\ngazetteer = \"gazetteer.json\"\nmcq = \"mcq.jsonl\"\n{extra}")).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_key_file_is_a_config_error() {
    let (dir, cfg) = setup("");
    let out = encsynth(&["--config", s(&cfg), "pipeline", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config_invalid");
    assert_eq!(err["field"], "crypto.key_file");

    let (dir, cfg) = setup("[crypto]\nkey_file = \"nope.hex\"\n");
    let out = encsynth(&["--config", s(&cfg), "pipeline", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["field"], "crypto.key_file");
}

#[test]
fn unknown_field_and_bad_values_exit_2() {
    let (dir, cfg) = setup("[graph]\nthreshhold = 0.5\n");
    let out = encsynth(&["--config", s(&cfg), "detect", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config_invalid");

    let (dir, cfg) = setup("[crypto]\nkey_file = \"key.hex\"\nmode = \"cbc\"\n");
    let out = encsynth(&["--config", s(&cfg), "detect", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["field"], "crypto.mode");

    let out = encsynth(&["--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_output_is_a_stage_failure() {
    let (dir, cfg) = setup("[crypto]\nkey_file = \"key.hex\"\n");
    let out = encsynth(&["--config", s(&cfg), "graph", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "stage_failure");
    assert_eq!(err["stage"], "graph");
}

#[test]
fn stages_chain_and_write_manifests() {
    let (dir, cfg) = setup("[crypto]\nkey_file = \"key.hex\"\n");
    let o = dir.path().join("o");
    for stage in ["detect", "encrypt", "graph", "tuples", "synth", "decrypt", "audit-leakage"] {
        let out = encsynth(&["--config", s(&cfg), stage, "--out", s(&o)]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        let ok: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(ok["ok"], true);
        let m: Value = serde_json::from_str(&fs::read_to_string(o.join(stage).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["stage"], stage);
        assert_eq!(m["config"]["paths"]["corpus"], "corpus.jsonl");
        assert!(m["outputs"].as_array().unwrap().iter().all(|x| x["sha256"].as_str().unwrap().len() == 64));
    }
    // decrypting the encrypted corpus restores the original text
    let orig: Vec<Value> = fs::read_to_string(demo("corpus.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let enc_dir = o.join("decrypt-enc");
    let out = encsynth(&[
        "--config",
        s(&cfg),
        "decrypt",
        "--input",
        s(&o.join("encrypt/corpus.jsonl")),
        "--out",
        s(&enc_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let back: Vec<Value> = fs::read_to_string(enc_dir.join("decrypt/corpus.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back.len(), orig.len());
    for (a, b) in orig.iter().zip(&back) {
        assert_eq!(a["text"], b["text"]);
    }
}

/// Answers every request with 503.
fn always_unavailable() -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        for stream in listener.incoming().take(64) {
            let Ok(mut stream) = stream else { break };
            let mut buf = [0u8; 65536];
            let _ = stream.read(&mut buf);
            let body = r#"{"error":"busy"}"#;
            let _ = write!(
                stream,
                "HTTP/1.1 503 Service Unavailable\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, h)
}

#[test]
fn exhausted_backend_exits_4_and_never_leaks_the_key() {
    let (url, _server) = always_unavailable();
    let (dir, cfg) = setup(&format!(
        "[crypto]\nkey_file = \"key.hex\"\n[backend]\nkind = \"openai\"\nbase_url = \"{url}\"\nmodel = \"m\"\napi_key = \"sk-test-secret-123\"\nmax_retries = 0\nmax_in_flight = 1\n"
    ));
    let o = dir.path().join("o");
    for stage in ["detect", "encrypt"] {
        assert!(encsynth(&["--config", s(&cfg), stage, "--out", s(&o)]).status.success());
    }
    let out = encsynth(&["--config", s(&cfg), "graph", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "backend_exhausted");
    assert!(!String::from_utf8_lossy(&out.stderr).contains("sk-test-secret"));
    let m = fs::read_to_string(o.join("detect/manifest.json")).unwrap();
    assert!(!m.contains("sk-test-secret"));
    assert!(m.contains("<redacted>"));
}

#[test]
fn env_interpolation_and_flag_overrides() {
    let (dir, cfg) = setup("[crypto]\nkey_file = \"${ENCSYNTH_TEST_KEYFILE}\"\n");
    let o = dir.path().join("o");
    let out = Command::new(env!("CARGO_BIN_EXE_encsynth"))
        .args(["--config", s(&cfg), "detect", "--out", s(&o)])
        .env("ENCSYNTH_TEST_KEYFILE", "key.hex")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(env!("CARGO_BIN_EXE_encsynth"))
        .args(["--config", s(&cfg), "detect", "--out", s(&o)])
        .env_remove("ENCSYNTH_TEST_KEYFILE")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["field"], "crypto.key_file");

    let out = Command::new(env!("CARGO_BIN_EXE_encsynth"))
        .args(["--config", s(&cfg), "encrypt", "--key-file", s(&demo("key.hex")), "--mode", "siv", "--out", s(&o)])
        .env("ENCSYNTH_TEST_KEYFILE", "missing.hex")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(o.join("encrypt/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "siv");
}
