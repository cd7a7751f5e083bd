//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test -p encsynth --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use encsynth_core::audit::{build_cipher_inventory, hallucination_report, leakage_report, FcndCause, PlaintextInventory};
use encsynth_core::backend::{FixtureChat, HashEmbedder, OverlapReranker};
use encsynth_core::corpus::{read_jsonl, Corpus, Document};
use encsynth_core::detcrypt::{prefix_for, Canonicalizer, CipherMode, DecryptStatus, DetCipher, KeyMaterial};
use encsynth_core::graph::{build_graph, k_tuples, EntityNode, GraphError, WeightedEdge};
use encsynth_core::pii::{Detector, EntitySpan, EntityType, SpanMap};
use encsynth_core::prompt::PromptSet;
use encsynth_core::rag::{build_index, chunk_corpus, load_mcq, run_eval, run_sweep, split_tokens, RagBackends, RagConfig};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo")
}

fn demo_cipher() -> DetCipher {
    DetCipher::ecb(KeyMaterial::from_file(&demo_dir().join("key.hex")).unwrap())
}

const PREFIXES: [&str; 8] = ["Person", "Location", "Phone", "ID", "Card", "Date", "Org", "Ent"];

/// Token renderings found by a plain scan, independent of the library parser.
fn scan_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for p in PREFIXES {
        let open = format!("{p}_[");
        let mut from = 0;
        while let Some(i) = text[from..].find(&open) {
            let start = from + i;
            let body = start + open.len();
            let len = text[body..]
                .bytes()
                .take_while(|b| b.is_ascii_alphanumeric() || matches!(b, b'+' | b'/' | b'='))
                .count();
            let preceded = text[..start].chars().next_back().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_');
            if len > 0 && text[body + len..].starts_with(']') && !preceded {
                out.push(text[start..body + len + 1].to_string());
            }
            from = body;
        }
    }
    out.sort();
    out
}

fn random_surface(rng: &mut StdRng) -> String {
    const ASCII: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.-' ";
    const CJK: [char; 10] = ['张', '伟', '李', '娜', '杭', '州', '王', '芳', '北', '京'];
    let n = rng.random_range(1..=40);
    let mut s: String = (0..n)
        .map(|_| {
            if rng.random_range(0..4) == 0 {
                CJK[rng.random_range(0..CJK.len())]
            } else {
                ASCII[rng.random_range(0..ASCII.len())] as char
            }
        })
        .collect();
    s = s.trim().to_string();
    if s.is_empty() {
        s.push('x');
    }
    s
}

fn crypto_roundtrip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let cipher = demo_cipher();
    let t0 = Instant::now();
    let mut failures = 0;
    for _ in 0..10_000 {
        let surface = random_surface(&mut rng);
        let ty = EntityType::ALL[rng.random_range(0..EntityType::ALL.len())];
        let a = cipher.encrypt_entity(&surface, ty).map_err(|e| e.to_string())?;
        let b = cipher.encrypt_entity(&surface, ty).map_err(|e| e.to_string())?;
        let back = cipher.decrypt_token(&a);
        let prefix_ok = a.render().starts_with(&format!("{}_[", prefix_for(ty)));
        if a.render() != b.render() || !prefix_ok || back.status != DecryptStatus::Ok || back.plaintext.as_deref() != Some(surface.as_str()) {
            failures += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure!(failures == 0, "{failures} of 10000 pairs failed");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("10000 pairs, 0 failures, {elapsed:.2?}"))
}

fn aes_vectors() -> Outcome {
    let v: Value = serde_json::from_str(include_str!("../../core/tests/oracles/vectors.json")).map_err(|e| e.to_string())?;
    let pt: [u8; 16] = hex::decode("00112233445566778899aabbccddeeff").unwrap().try_into().unwrap();
    let mut checked = 0;
    for (bytes, key) in [(16usize, "fips197_c1"), (32, "fips197_c3")] {
        let k = KeyMaterial::new((0..bytes as u8).collect(), "fips").map_err(|e| e.to_string())?;
        let c = DetCipher::new(k, CipherMode::Ecb, Canonicalizer::default());
        let got = hex::encode(c.encrypt_block(pt));
        ensure!(got == v[key].as_str().unwrap_or_default(), "{key}: got {got}");
        checked += 1;
    }
    for (table, bytes) in [("ecb128", 16usize), ("ecb256", 32)] {
        let k = KeyMaterial::new((0..bytes as u8).collect(), "oracle").map_err(|e| e.to_string())?;
        let c = DetCipher::new(k, CipherMode::Ecb, Canonicalizer::default());
        for (surface, want) in v[table].as_object().ok_or("missing table")? {
            let tok = c.encrypt_entity(surface, EntityType::Person).map_err(|e| e.to_string())?;
            ensure!(tok.payload_b64 == want.as_str().unwrap_or_default(), "{table} {surface}: {}", tok.payload_b64);
            checked += 1;
        }
    }
    Ok(format!("{checked} vectors byte-equal"))
}

fn base64_repair() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let cipher = demo_cipher();
    let (mut stripped, mut recovered) = (0, 0);
    while stripped < 1000 {
        let surface = random_surface(&mut rng);
        let tok = cipher.encrypt_entity(&surface, EntityType::Person).map_err(|e| e.to_string())?;
        let bare = tok.payload_b64.trim_end_matches('=');
        let out = cipher.decrypt_payload(bare);
        if bare.len() != tok.payload_b64.len() {
            stripped += 1;
            if out.status == DecryptStatus::OkRepairedBase64 && out.plaintext.as_deref() == Some(surface.as_str()) {
                recovered += 1;
            }
        } else {
            ensure!(out.status == DecryptStatus::Ok, "unpadded payload {bare} gave {:?}", out.status);
        }
    }
    ensure!(stripped > 0 && recovered == stripped, "recovered {recovered} of {stripped}");
    for i in 0..50u8 {
        let bytes: Vec<u8> = (0..15).map(|j| i.wrapping_mul(31).wrapping_add(j * 7)).collect();
        let out = cipher.decrypt_payload(&base64_of(&bytes));
        ensure!(out.status == DecryptStatus::FailPadding && out.plaintext.is_none(), "15-byte fixture {i} gave {:?}", out.status);
    }
    Ok(format!("{recovered}/{stripped} stripped tokens recovered, 50 15-byte fixtures fail_padding"))
}

fn node(id: &str) -> EntityNode {
    EntityNode {
        entity_id: id.to_string(),
        entity_type: EntityType::Person,
        mention_count: 1,
        doc_refs: vec!["d".into()],
    }
}

/// Neighbour-sort reference: each center's k-1 strongest neighbours, ties to
/// the smaller id; member sets compared unordered.
fn neighbor_sort(n: usize, edges: &[(usize, usize, f64)], k: usize) -> (BTreeSet<Vec<String>>, usize, usize) {
    let id = |i: usize| format!("e{i:02}");
    let mut adj: BTreeMap<String, Vec<(String, f64)>> = (0..n).map(|i| (id(i), vec![])).collect();
    for &(a, b, s) in edges {
        adj.get_mut(&id(a)).unwrap().push((id(b), s));
        adj.get_mut(&id(b)).unwrap().push((id(a), s));
    }
    let (mut sets, mut skipped, mut emitted) = (BTreeSet::new(), 0, 0);
    for (center, mut nbrs) in adj {
        if nbrs.len() < k - 1 {
            skipped += 1;
            continue;
        }
        nbrs.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
        let mut m: Vec<String> = nbrs.into_iter().take(k - 1).map(|(i, _)| i).collect();
        m.push(center);
        m.sort();
        sets.insert(m);
        emitted += 1;
    }
    let dups = emitted - sets.len();
    (sets, skipped, dups)
}

fn graph_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut compared = 0;
    for g in 0..100 {
        let n = rng.random_range(2..=50);
        let density = rng.random_range(0.1..0.9);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(density) {
                    edges.push((a, b, rng.random_range(0..=20) as f64 / 20.0));
                }
            }
        }
        let mk = |t: f64| {
            build_graph(
                (0..n).map(|i| node(&format!("e{i:02}"))).collect(),
                edges.iter().map(|&(a, b, s)| WeightedEdge::new(&format!("e{a:02}"), &format!("e{b:02}"), s, "")).collect(),
                t,
            )
        };
        let full = mk(0.0).map_err(|e| e.to_string())?;
        for k in [2usize, 4, 6, 8, 10] {
            if k > n {
                ensure!(matches!(k_tuples(&full, k), Err(GraphError::InvalidK { .. })), "graph {g}: k={k} > n={n} accepted");
                continue;
            }
            let got = k_tuples(&full, k).map_err(|e| e.to_string())?;
            let sets: BTreeSet<Vec<String>> = got
                .tuples
                .iter()
                .map(|t| {
                    let mut m = t.members.clone();
                    m.sort();
                    m
                })
                .collect();
            let (want, skipped, dups) = neighbor_sort(n, &edges, k);
            ensure!(sets == want, "graph {g} (n={n}) k={k}: tuple sets differ");
            ensure!(got.skipped == skipped && got.duplicates == dups, "graph {g} k={k}: skipped/duplicates differ");
            ensure!(got.tuples.iter().all(|t| t.members.len() == k && t.members[0] == t.center), "graph {g} k={k}: malformed tuple");
            compared += 1;
        }
        let pruned = mk(0.5).map_err(|e| e.to_string())?;
        ensure!(pruned.edges.iter().all(|e| e.score >= 0.5), "graph {g}: edge below 0.5 survived");
        let kept = edges.iter().filter(|e| e.2 >= 0.5).count();
        ensure!(pruned.edges.len() == kept && pruned.pruned == edges.len() - kept, "graph {g}: pruning count");
    }
    Ok(format!("100 graphs, {compared} (graph, k) cases equal to the reference"))
}

fn inventory_of(surfaces: &[&str]) -> PlaintextInventory {
    let mut spans = SpanMap::new();
    spans.insert(
        "src".into(),
        surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| EntitySpan {
                doc_id: "src".into(),
                start: i * 40,
                end: i * 40 + s.chars().count(),
                surface: s.to_string(),
                entity_type: EntityType::Person,
                detector: Detector::Manual,
                confidence: 1.0,
            })
            .collect(),
    );
    PlaintextInventory::from_spans(&spans, Canonicalizer::default())
}

fn leakage(run: &PipelineRuns) -> Outcome {
    let cipher = demo_cipher();
    let names = ["Halvorsen", "Okonkwo", "Yamashiro"];
    let inv = inventory_of(&names);
    let mut docs = Vec::new();
    for d in 0..30 {
        let mut text = String::new();
        for j in 0..30 {
            let tok = cipher.encrypt_entity(names[(d + j) % 3], EntityType::Person).unwrap().render();
            text.push_str(&format!("{tok} signed page {j}. "));
        }
        if d < 3 {
            text.push_str(&format!("Later {} returned. ", names[d]));
        }
        docs.push(Document::synthetic(format!("s{d}"), text, vec!["src".into()]));
    }
    let (plain, tokens) = docs.iter().fold((0, 0), |(p, t), d| {
        (p + names.iter().map(|n| d.text.matches(n).count()).sum::<usize>(), t + scan_tokens(&d.text).len())
    });
    ensure!((plain, tokens) == (3, 900), "fixture built {plain}/{tokens}");
    let corpus = Corpus::new(docs.clone()).unwrap();
    let rep = leakage_report(&corpus, &inv, Canonicalizer::default(), None).map_err(|e| e.to_string())?;
    ensure!(rep.total.unencrypted == 3 && rep.total.encrypted == 900, "counted {}/{}", rep.total.unencrypted, rep.total.encrypted);
    ensure!(rep.total_display == "1:300", "display {}", rep.total_display);
    ensure!(rep.total.ratio == Some(3.0 / 900.0), "ratio {:?}", rep.total.ratio);

    let clean: Vec<Document> = docs
        .into_iter()
        .map(|mut d| {
            if let Some(i) = d.text.find("Later ") {
                d.text.truncate(i);
            }
            d
        })
        .collect();
    let rep = leakage_report(&Corpus::new(clean).unwrap(), &inv, Canonicalizer::default(), None).map_err(|e| e.to_string())?;
    ensure!(rep.total.unencrypted == 0 && rep.total_display == "0", "fully encrypted fixture: {}", rep.total_display);

    let e2e: Value = serde_json::from_str(&fs::read_to_string(run.a.join("audit-leakage/report.json")).map_err(|e| e.to_string())?).unwrap();
    ensure!(e2e["total"]["unencrypted"] == 0, "pipeline report: {}", e2e["total"]);
    ensure!(e2e["total"]["encrypted"].as_u64().unwrap_or(0) > 0, "pipeline synthesized no tokens");
    let hits: u64 = e2e["recognizer_hits"].as_object().map(|m| m.values().filter_map(Value::as_u64).sum()).unwrap_or(0);
    ensure!(hits == 0, "{hits} recognizer hits in synthetic text");
    // independent scan: no source surface in any synthetic text
    let gaz: BTreeMap<String, Vec<String>> = serde_json::from_str(&fs::read_to_string(demo_dir().join("gazetteer.json")).unwrap()).unwrap();
    let mut surfaces: Vec<String> = gaz.into_values().flatten().collect();
    surfaces.extend(
        ["2021-03-14", "+44 20 7946 0958", "4111 1111 1111 1111", "March 3, 2021", "11010519491231002X", "13800138000", "2021年5月6日"]
            .map(String::from),
    );
    let synth: Vec<Document> = read_jsonl(&run.a.join("synth/corpus.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!synth.is_empty(), "no synthetic documents");
    for d in &synth {
        for s in &surfaces {
            ensure!(!d.text.contains(s.as_str()), "{s} appears in {}", d.doc_id);
        }
    }
    Ok(format!("1:300 on 3/900, 0 on fully encrypted, 0 hits over {} synthetic docs", synth.len()))
}

fn hallucination() -> Outcome {
    let cipher = demo_cipher();
    let toks: Vec<String> = (0..68)
        .map(|i| cipher.encrypt_entity(&format!("Name{i:03}"), EntityType::Person).unwrap().render())
        .collect();
    let docs = vec![
        Document::synthetic("a-0", toks[..57].join(" met "), vec!["article-a".into()]),
        Document::synthetic("b-0", toks[57..].join(" met "), vec!["article-b".into()]),
    ];
    let inv = build_cipher_inventory(&Corpus::new(docs).unwrap(), "article_id").map_err(|e| e.to_string())?;
    let responses = vec![
        ("article-a".to_string(), toks[..30].join(", ")),
        ("article-a".to_string(), format!("{} and {}", toks[30..57].join(", "), toks[57..].join(", "))),
    ];
    let rep = hallucination_report(&responses, &inv, &cipher).map_err(|e| e.to_string())?;
    let want = 11.0 / 68.0;
    ensure!(rep.unique_ciphers == 68 && rep.unique_failures == 11, "unique {}/{}", rep.unique_failures, rep.unique_ciphers);
    ensure!((rep.unique_ratio - want).abs() < 1e-12 && (rep.unique_ratio - 0.16).abs() <= 0.005, "ratio {}", rep.unique_ratio);
    ensure!(rep.fcaoa == 11 && rep.fcnd == 0, "fcaoa {} fcnd {}", rep.fcaoa, rep.fcnd);

    // five undecodable citations: two broken Base64, three bad padding
    let good: Vec<String> = (0..4).map(|i| cipher.encrypt_entity(&format!("Clerk{i}"), EntityType::Person).unwrap().render()).collect();
    // decrypts to an all-zero block, so the pad byte is 0
    let zero_block = base64_of(&cipher.encrypt_block([0u8; 16]));
    let bad = [
        "Person_[ab=cd]".to_string(),
        "Person_[Q]".to_string(),
        format!("Person_[{}]", base64_of(&[7u8; 15])),
        format!("Person_[{}]", base64_of(&[9u8; 20])),
        format!("Person_[{zero_block}]"),
    ];
    let docs = vec![Document::synthetic("j-0", good.join(" and "), vec!["case".into()])];
    let inv = build_cipher_inventory(&Corpus::new(docs).unwrap(), "article_id").map_err(|e| e.to_string())?;
    let responses = vec![("case".to_string(), format!("{} cites {}", good.join(", "), bad.join("; ")))];
    let rep = hallucination_report(&responses, &inv, &cipher).map_err(|e| e.to_string())?;
    let b64 = rep.fcnd_causes.get(&FcndCause::Base64Format).copied().unwrap_or(0);
    let pad = rep.fcnd_causes.get(&FcndCause::Pkcs7Padding).copied().unwrap_or(0);
    ensure!(rep.fcnd == 5 && b64 == 2 && pad == 3 && rep.fcaoa == 0, "fcnd {} ({b64} base64, {pad} padding), fcaoa {}", rep.fcnd, rep.fcaoa);
    Ok(format!("unique_ratio {:.4} (11/68); FCND 2 base64_format + 3 pkcs7_padding", want))
}

/// Standard-alphabet encoder, kept local so fixtures do not go through the
/// crate under test.
fn base64_of(bytes: &[u8]) -> String {
    const A: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut s = String::new();
    for ch in bytes.chunks(3) {
        let n = (ch[0] as u32) << 16 | (*ch.get(1).unwrap_or(&0) as u32) << 8 | *ch.get(2).unwrap_or(&0) as u32;
        for i in 0..4 {
            s.push(if i <= ch.len() { A[(n >> (18 - 6 * i) & 63) as usize] as char } else { '=' });
        }
    }
    s
}

fn rag_protocol() -> Outcome {
    let items = load_mcq(&demo_dir().join("mcq.jsonl")).map_err(|e| e.to_string())?;
    ensure!(items.len() == 20, "fixture has {} items", items.len());
    let corpus = Corpus::new(read_jsonl(&demo_dir().join("corpus.jsonl")).map_err(|e| e.to_string())?).unwrap();
    let e = HashEmbedder::default();
    let prompts = PromptSet::default();
    let oracle = items
        .iter()
        .fold(FixtureChat::new(), |c, it| c.tag(&format!("mcq:{}", it.id), &format!("Answer: {}", it.gold)));
    let gibberish = FixtureChat::new().fallback("zxq blorp wug");
    let idx = build_index(chunk_corpus(&corpus, 128).map_err(|e| e.to_string())?, &e).map_err(|e| e.to_string())?;
    let cfg = RagConfig::new(128, 4);
    let run = |llm: &FixtureChat| run_eval(&items, &idx, &cfg, &RagBackends { embedder: &e, reranker: &OverlapReranker, llm }, &prompts);
    let good = run(&oracle).map_err(|e| e.to_string())?;
    ensure!(good.accuracy == 1.0 && good.n_format_failures == 0, "oracle: {} acc, {} failures", good.accuracy, good.n_format_failures);
    let bad = run(&gibberish).map_err(|e| e.to_string())?;
    ensure!(bad.accuracy == 0.0 && bad.n_format_failures == 20, "gibberish: {} acc, {} failures", bad.accuracy, bad.n_format_failures);

    let sizes = [128, 1024];
    let ks = [2, 4, 8, 16];
    for (llm, want_fail) in [(&oracle, 0), (&gibberish, 20)] {
        let (cells, details) = run_sweep(&items, &corpus, &sizes, &ks, &RagBackends { embedder: &e, reranker: &OverlapReranker, llm }, &prompts)
            .map_err(|e| e.to_string())?;
        ensure!(cells.len() == 8 && details.len() == 8, "{} cells", cells.len());
        let grid: BTreeSet<(usize, usize)> = cells.iter().map(|c| (c.chunk_size, c.top_k)).collect();
        ensure!(grid.len() == 8, "grid incomplete");
        ensure!(cells.iter().all(|c| c.n_format_failures == want_fail), "sweep failure counts off");
    }
    Ok("oracle 1.0/0 failures, gibberish 0.0/20 failures, 2x4 sweep complete".into())
}

struct PipelineRuns {
    _tmp: tempfile::TempDir,
    a: PathBuf,
    b: PathBuf,
    times: [Duration; 2],
}

fn run_pipeline(out: &Path) -> Result<Duration, String> {
    let t0 = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_encsynth"))
        .arg("--config")
        .arg(demo_dir().join("pipeline.toml"))
        .arg("pipeline")
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "pipeline failed: {}", String::from_utf8_lossy(&status.stderr));
    Ok(t0.elapsed())
}

fn pipeline_runs() -> Result<PipelineRuns, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tmp.path().join("run-a");
    let b = tmp.path().join("run-b");
    let times = [run_pipeline(&a)?, run_pipeline(&b)?];
    Ok(PipelineRuns { _tmp: tmp, a, b, times })
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility(run: &PipelineRuns) -> Outcome {
    let (ta, tb) = (tree(&run.a), tree(&run.b));
    let names_a: Vec<_> = ta.keys().collect();
    ensure!(names_a == tb.keys().collect::<Vec<_>>(), "file sets differ");
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k.clone()).collect();
    ensure!(differing.is_empty(), "differing files: {differing:?}");
    let manifests = ta.keys().filter(|k| k.ends_with("manifest.json")).count();
    ensure!(manifests >= 10, "only {manifests} manifests");
    ensure!(run.times.iter().all(|t| *t < Duration::from_secs(60)), "runtimes {:?}", run.times);
    Ok(format!("{} files ({manifests} manifests) identical, runs {:.2?} / {:.2?}", ta.len(), run.times[0], run.times[1]))
}

fn chunk_integrity(run: &PipelineRuns) -> Outcome {
    let mut corpora: Vec<(String, Vec<Document>)> = Vec::new();
    for rel in ["encrypt/corpus.jsonl", "synth/corpus.jsonl"] {
        corpora.push((rel.into(), read_jsonl(&run.a.join(rel)).map_err(|e| e.to_string())?));
    }
    // adversarial fixture: tokens glued to CJK, punctuation and line breaks
    let cipher = demo_cipher();
    let mut rng = StdRng::seed_from_u64(9);
    let glue = ["", " ", "。", "，", "\n", "\n\n", ". ", "(", ")", "甲乙", "word"];
    let docs = (0..40)
        .map(|d| {
            let mut text = String::new();
            for _ in 0..rng.random_range(5..120) {
                text.push_str(glue[rng.random_range(0..glue.len())]);
                if rng.random_bool(0.4) {
                    let s = random_surface(&mut rng);
                    text.push_str(&cipher.encrypt_entity(&s, EntityType::ALL[rng.random_range(0..8)]).unwrap().render());
                } else {
                    text.push_str(&random_surface(&mut rng));
                }
            }
            Document::original(format!("adv{d}"), text)
        })
        .collect();
    corpora.push(("adversarial".into(), docs));
    let mut checked = 0;
    for (name, docs) in &corpora {
        let corpus = Corpus::new(docs.clone()).map_err(|e| e.to_string())?;
        for size in [16, 32, 64, 128, 1024] {
            let chunks = chunk_corpus(&corpus, size).map_err(|e| e.to_string())?;
            for d in corpus.documents() {
                let want = scan_tokens(&d.text);
                let mut got: Vec<String> = chunks.iter().filter(|c| c.doc_id == d.doc_id).flat_map(|c| scan_tokens(&c.text)).collect();
                got.sort();
                ensure!(got == want, "{name}/{} at size {size}: {} tokens whole of {}", d.doc_id, got.len(), want.len());
                ensure!(split_tokens(d, &chunks).is_empty(), "{name}/{} at size {size}: split reported", d.doc_id);
                checked += want.len();
            }
        }
    }
    Ok(format!("{checked} token placements checked, 0 split"))
}

fn main() {
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let r = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match &r {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(why) => println!("FAIL {n} {name}: {why}"),
        }
        results.push(r.is_ok());
    };
    let runs = pipeline_runs();
    let with_runs = |f: fn(&PipelineRuns) -> Outcome| {
        let runs = &runs;
        move || match runs {
            Ok(r) => f(r),
            Err(e) => Err(format!("pipeline: {e}")),
        }
    };
    record(1, "crypto determinism and roundtrip", &crypto_roundtrip);
    record(2, "AES reference vectors", &aes_vectors);
    record(3, "Base64 repair and padding failures", &base64_repair);
    record(4, "tuple oracle equivalence and pruning", &graph_oracle);
    record(5, "leakage arithmetic", &with_runs(leakage));
    record(6, "hallucination classification", &hallucination);
    record(7, "RAG protocol", &rag_protocol);
    record(8, "end-to-end reproducibility", &with_runs(reproducibility));
    record(9, "chunk integrity", &with_runs(chunk_integrity));
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
