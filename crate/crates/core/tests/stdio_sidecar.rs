use std::path::PathBuf;
use std::sync::Arc;

use encsynth_core::backend::Embedder;
use encsynth_core::corpus::Document;
use encsynth_core::pii::{EntityType, PiiDetector, RecognizerSet};
use encsynth_core::sidecar::{SidecarClient, SidecarEmbedder, SidecarError, StdioSidecar};

fn spawn() -> Option<StdioSidecar> {
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_sidecar.py");
    if std::process::Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not available, skipping");
        return None;
    }
    Some(StdioSidecar::spawn("python3", &[script.to_string_lossy().into_owned()]).unwrap())
}

#[test]
fn request_response_over_pipes() {
    let Some(sc) = spawn() else { return };
    assert_eq!(sc.health().unwrap().dim, 4);
    let spans = sc.ner("Alice met Bob in Paris.", "en").unwrap();
    let got: Vec<_> = spans.iter().map(|s| (s.start, s.end, s.entity_type.clone())).collect();
    assert!(got.contains(&(0, 5, "PER".to_string())));
    assert!(got.contains(&(17, 22, "LOC".to_string())));
    assert_eq!(sc.embed(&["abcd".into(), "".into()]).unwrap(), vec![vec![1.0; 4], vec![0.0; 4]]);
}

#[test]
fn detector_merges_sidecar_and_regex_spans() {
    let Some(sc) = spawn() else { return };
    let det = PiiDetector::new(RecognizerSet::default_set(), Some(Arc::new(sc)));
    let doc = Document::original("d1", "Alice (alice@example.com) works at Acme.");
    let spans = det.detect(&doc).unwrap().spans;
    let types: Vec<_> = spans.iter().map(|s| (s.surface.as_str(), s.entity_type)).collect();
    assert!(types.contains(&("Alice", EntityType::Person)));
    assert!(types.contains(&("Acme", EntityType::Org)));
    assert!(spans.windows(2).all(|w| w[0].end <= w[1].start));
}

#[test]
fn out_of_range_spans_are_dropped() {
    let Some(sc) = spawn() else { return };
    let det = PiiDetector::new(RecognizerSet::default_set(), Some(Arc::new(sc)));
    let found = det.detect(&Document::original("d", "bad offsets")).unwrap();
    assert_eq!(found.dropped, 1);
    assert!(found.spans.is_empty());
}

#[test]
fn embedder_enforces_dimension() {
    let Some(sc) = spawn() else { return };
    let emb = SidecarEmbedder::connect(sc).unwrap();
    assert_eq!(emb.dim(), 4);
    let v = emb.embed(&["aaaa".into(), "bbbb".into()]).unwrap();
    assert_eq!(v[0].cosine(&v[1]), 0.0);
}

#[test]
fn exited_sidecar_is_unavailable() {
    let Some(sc) = spawn() else { return };
    assert!(matches!(sc.ner("crash", "en"), Err(SidecarError::Unavailable(_))));
    assert!(matches!(sc.health(), Err(SidecarError::Unavailable(_))));
}

#[test]
fn missing_program_is_unavailable() {
    assert!(matches!(
        StdioSidecar::spawn("/nonexistent/sidecar-binary", &[]),
        Err(SidecarError::Unavailable(_))
    ));
}
