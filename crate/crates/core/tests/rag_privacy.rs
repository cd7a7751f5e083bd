use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use encsynth_core::backend::{ChatRequest, FnChat, HashEmbedder, OverlapReranker};
use encsynth_core::corpus::{Corpus, Document};
use encsynth_core::detcrypt::{rewrite_encrypt, DetCipher, KeyMaterial};
use encsynth_core::pii::{EntityType, PiiDetector, RecognizerSet};
use encsynth_core::prompt::PromptSet;
use encsynth_core::rag::{build_index, chunk_corpus, encrypt_item, run_eval, McqItem, RagBackends, RagConfig};
use encsynth_core::sidecar::MockSidecar;

#[test]
fn encrypted_questions_reach_the_model_without_plaintext() {
    let names = [("Edda Lindqvist", EntityType::Person), ("Port Hallan", EntityType::Location), ("王芳", EntityType::Person)];
    let sidecar = MockSidecar::with_gazetteer(names.iter().map(|(n, t)| (n.to_string(), *t)).collect());
    let det = PiiDetector::new(RecognizerSet::default_set(), Some(Arc::new(sidecar)));
    let cipher = DetCipher::ecb(KeyMaterial::from_hex("2b7e151628aed2a6abf7158809cf4f3c").unwrap());
    let types: BTreeSet<EntityType> = EntityType::ALL.into_iter().collect();

    let source = Document::original("d0", "Edda Lindqvist sailed from Port Hallan on 2020-11-02 with 王芳.");
    let spans = det.detect(&source).unwrap().spans;
    let (enc_doc, _) = rewrite_encrypt(&source, &spans, &cipher).unwrap();
    let corpus = Corpus::new(vec![enc_doc]).unwrap();

    let item = McqItem {
        id: "q1".into(),
        question: "Where did Edda Lindqvist sail from, and with whom?".into(),
        options: vec!["Port Hallan, with 王芳".into(), "Oslo".into(), "Port Hallan, alone".into(), "Nowhere".into()],
        gold: "A".into(),
        encrypted: true,
    };
    let enc = encrypt_item(&item, &det, &cipher, &types).unwrap();
    assert_eq!(enc.gold, "A");

    let seen = Mutex::new(Vec::new());
    let chat = FnChat(|req: &ChatRequest| {
        seen.lock().unwrap().push(req.prompt().to_string());
        Ok("Answer: A".to_string())
    });
    let e = HashEmbedder::default();
    let idx = build_index(chunk_corpus(&corpus, 32).unwrap(), &e).unwrap();
    let b = RagBackends { embedder: &e, reranker: &OverlapReranker, llm: &chat };
    let r = run_eval(&[enc], &idx, &RagConfig::new(32, 2), &b, &PromptSet::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let prompts = seen.into_inner().unwrap();
    assert_eq!(prompts.len(), 1);
    for (name, ty) in names {
        assert!(!prompts[0].contains(name), "{name} leaked into the prompt");
        let tok = cipher.encrypt_entity(name, ty).unwrap().render();
        assert!(prompts[0].contains(&tok), "{tok} missing from the prompt");
    }
    assert!(!prompts[0].contains("2020-11-02"));
}
