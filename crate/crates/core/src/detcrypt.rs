//! Deterministic entity encryption.
//!
//! A surface form is canonicalised, UTF-8 encoded, PKCS7-padded and
//! encrypted with AES-ECB (or AES-SIV), then Base64-encoded and wrapped in a
//! typed prefix such as `Person_[...]`.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};
use aes_siv::siv::{Aes128Siv, Aes256Siv};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Document;
use crate::pii::{CharIndex, EntitySpan, EntityType};

const BLOCK: usize = 16;
pub const KDF_ITERATIONS: u32 = 100_000;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("key must be 16 or 32 bytes, got {0}")]
    InvalidKeyLength(usize),
    #[error("key file is not valid hex: {0}")]
    InvalidHex(String),
    #[error("cannot read key file {path}: {source}")]
    KeyIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("surface is empty after canonicalization")]
    EmptySurface,
    #[error("spans overlap: [{0}, {1}) and [{2}, {3})")]
    OverlappingSpans(usize, usize, usize, usize),
    #[error("span [{start}, {end}) does not match document {doc_id}")]
    InvalidSpan {
        doc_id: String,
        start: usize,
        end: usize,
    },
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    bytes: Vec<u8>,
    key_id: String,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("bits", &(self.bytes.len() * 8))
            .field("key_id", &self.key_id)
            .finish()
    }
}

impl KeyMaterial {
    pub fn new(bytes: Vec<u8>, key_id: impl Into<String>) -> Result<Self, CryptoError> {
        if bytes.len() != 16 && bytes.len() != 32 {
            return Err(CryptoError::InvalidKeyLength(bytes.len()));
        }
        Ok(KeyMaterial {
            bytes,
            key_id: key_id.into(),
        })
    }

    /// Key id defaults to a short fingerprint so manifests never carry the key.
    pub fn from_hex(hex_str: &str) -> Result<Self, CryptoError> {
        let clean: String = hex_str.chars().filter(|c| !c.is_whitespace()).collect();
        let bytes = hex::decode(&clean).map_err(|e| CryptoError::InvalidHex(e.to_string()))?;
        let id = fingerprint(&bytes);
        Self::new(bytes, id)
    }

    pub fn from_file(path: &Path) -> Result<Self, CryptoError> {
        let text = std::fs::read_to_string(path).map_err(|source| CryptoError::KeyIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_hex(&text)
    }

    /// PBKDF2-HMAC-SHA256 with salt `encsynth-kdf:<key_id>`, 128-bit output.
    pub fn from_passphrase(passphrase: &str, key_id: &str) -> Result<Self, CryptoError> {
        let salt = format!("encsynth-kdf:{key_id}");
        let mut out = [0u8; 16];
        pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt.as_bytes(), KDF_ITERATIONS, &mut out);
        Self::new(out.to_vec(), key_id)
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn bits(&self) -> usize {
        self.bytes.len() * 8
    }
}

fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    format!("sha256:{}", hex::encode(&digest[..4]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherMode {
    #[default]
    Ecb,
    Siv,
}

impl fmt::Display for CipherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CipherMode::Ecb => "ecb",
            CipherMode::Siv => "siv",
        })
    }
}

impl std::str::FromStr for CipherMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecb" => Ok(CipherMode::Ecb),
            "siv" => Ok(CipherMode::Siv),
            other => Err(format!("unknown cipher mode {other:?}")),
        }
    }
}

/// NFC + trim, with optional case folding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Canonicalizer {
    pub casefold: bool,
}

impl Canonicalizer {
    pub fn canonical(&self, surface: &str) -> String {
        let nfc: String = surface.trim().nfc().collect();
        if self.casefold {
            nfc.to_lowercase()
        } else {
            nfc
        }
    }
}

pub fn prefix_for(entity_type: EntityType) -> &'static str {
    match entity_type {
        EntityType::Person => "Person",
        EntityType::Location => "Location",
        EntityType::Phone => "Phone",
        EntityType::IdNumber => "ID",
        EntityType::BankCard => "Card",
        EntityType::Date => "Date",
        EntityType::Org => "Org",
        EntityType::Other => "Ent",
    }
}

pub fn type_for_prefix(prefix: &str) -> Option<EntityType> {
    EntityType::ALL.into_iter().find(|t| prefix_for(*t) == prefix)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CipherToken {
    pub entity_type: EntityType,
    pub payload_b64: String,
}

impl CipherToken {
    pub fn render(&self) -> String {
        format!("{}_[{}]", prefix_for(self.entity_type), self.payload_b64)
    }
}

impl fmt::Display for CipherToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_[{}]", prefix_for(self.entity_type), self.payload_b64)
    }
}

/// One grammar match in a text. `valid` means the payload decodes strictly to
/// a non-empty whole number of blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatch {
    pub token: CipherToken,
    pub bytes: Range<usize>,
    pub chars: Range<usize>,
    pub valid: bool,
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(Person|Location|Phone|ID|Card|Date|Org|Ent)_\[([A-Za-z0-9+/=]+)\]")
            .expect("token grammar compiles")
    })
}

fn payload_valid(payload: &str) -> bool {
    STANDARD
        .decode(payload)
        .is_ok_and(|b| !b.is_empty() && b.len() % BLOCK == 0)
}

/// Finds every token rendering in `text`, malformed payloads included. A
/// prefix glued to a preceding ASCII word character does not count.
pub fn parse_cipher_tokens(text: &str) -> Vec<TokenMatch> {
    let re = token_regex();
    let mut out = Vec::new();
    let mut index: Option<CharIndex> = None;
    let mut pos = 0;
    while let Some(caps) = re.captures_at(text, pos) {
        let whole = caps.get(0).expect("group 0");
        let glued = text[..whole.start()]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_');
        if glued {
            pos = whole.start() + 1;
            continue;
        }
        let prefix = caps.get(1).expect("prefix group").as_str();
        let payload = caps.get(2).expect("payload group").as_str();
        let idx = index.get_or_insert_with(|| CharIndex::new(text));
        out.push(TokenMatch {
            token: CipherToken {
                entity_type: type_for_prefix(prefix).expect("prefix in table"),
                payload_b64: payload.to_string(),
            },
            bytes: whole.range(),
            chars: idx.to_char(whole.start())..idx.to_char(whole.end()),
            valid: payload_valid(payload),
        });
        pos = whole.end();
    }
    out
}

/// Appends `=` until the length is a multiple of 4. `repaired` is true only
/// when something was appended and the result decodes.
pub fn repair_base64(s: &str) -> (String, bool) {
    let missing = (4 - s.len() % 4) % 4;
    if missing == 0 {
        return (s.to_string(), false);
    }
    let fixed = format!("{s}{}", "=".repeat(missing));
    let ok = STANDARD.decode(&fixed).is_ok();
    (fixed, ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecryptStatus {
    Ok,
    OkRepairedBase64,
    FailBase64,
    FailPadding,
    FailNotInInventory,
}

impl DecryptStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, DecryptStatus::Ok | DecryptStatus::OkRepairedBase64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptOutcome {
    pub status: DecryptStatus,
    pub plaintext: Option<String>,
    pub note: String,
}

impl DecryptOutcome {
    fn fail(status: DecryptStatus, note: impl Into<String>) -> Self {
        DecryptOutcome {
            status,
            plaintext: None,
            note: note.into(),
        }
    }
}

enum Block {
    A128(Box<Aes128>),
    A256(Box<Aes256>),
}

/// Deterministic cipher bound to one key, mode and canonical form.
pub struct DetCipher {
    key: KeyMaterial,
    mode: CipherMode,
    canon: Canonicalizer,
    block: Block,
    siv_key: Vec<u8>,
}

impl fmt::Debug for DetCipher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetCipher")
            .field("key", &self.key)
            .field("mode", &self.mode)
            .field("canon", &self.canon)
            .finish()
    }
}

impl DetCipher {
    pub fn new(key: KeyMaterial, mode: CipherMode, canon: Canonicalizer) -> Self {
        let block = match key.bytes.len() {
            16 => Block::A128(Box::new(Aes128::new(GenericArray::from_slice(&key.bytes)))),
            _ => Block::A256(Box::new(Aes256::new(GenericArray::from_slice(&key.bytes)))),
        };
        let mut h = Sha512::new();
        h.update(b"encsynth-siv\x00");
        h.update(&key.bytes);
        let siv_key = h.finalize()[..2 * key.bytes.len()].to_vec();
        DetCipher {
            key,
            mode,
            canon,
            block,
            siv_key,
        }
    }

    pub fn ecb(key: KeyMaterial) -> Self {
        Self::new(key, CipherMode::Ecb, Canonicalizer::default())
    }

    pub fn key(&self) -> &KeyMaterial {
        &self.key
    }

    pub fn mode(&self) -> CipherMode {
        self.mode
    }

    pub fn canonicalizer(&self) -> Canonicalizer {
        self.canon
    }

    /// Raw single-block AES, exposed for known-answer tests.
    pub fn encrypt_block(&self, block: [u8; 16]) -> [u8; 16] {
        let mut b = GenericArray::from(block);
        match &self.block {
            Block::A128(c) => c.encrypt_block(&mut b),
            Block::A256(c) => c.encrypt_block(&mut b),
        }
        b.into()
    }

    fn ecb_encrypt(&self, data: &mut [u8]) {
        for chunk in data.chunks_exact_mut(BLOCK) {
            let b = GenericArray::from_mut_slice(chunk);
            match &self.block {
                Block::A128(c) => c.encrypt_block(b),
                Block::A256(c) => c.encrypt_block(b),
            }
        }
    }

    fn ecb_decrypt(&self, data: &mut [u8]) {
        for chunk in data.chunks_exact_mut(BLOCK) {
            let b = GenericArray::from_mut_slice(chunk);
            match &self.block {
                Block::A128(c) => c.decrypt_block(b),
                Block::A256(c) => c.decrypt_block(b),
            }
        }
    }

    fn siv_seal(&self, padded: &[u8]) -> Vec<u8> {
        let no_ad: [&[u8]; 0] = [];
        let sealed = if self.siv_key.len() == 32 {
            Aes128Siv::new(GenericArray::from_slice(&self.siv_key)).encrypt(no_ad, padded)
        } else {
            Aes256Siv::new(GenericArray::from_slice(&self.siv_key)).encrypt(no_ad, padded)
        };
        sealed.expect("SIV encryption of in-memory data cannot fail")
    }

    fn siv_open(&self, sealed: &[u8]) -> Option<Vec<u8>> {
        let no_ad: [&[u8]; 0] = [];
        if self.siv_key.len() == 32 {
            Aes128Siv::new(GenericArray::from_slice(&self.siv_key)).decrypt(no_ad, sealed).ok()
        } else {
            Aes256Siv::new(GenericArray::from_slice(&self.siv_key)).decrypt(no_ad, sealed).ok()
        }
    }

    pub fn canonical(&self, surface: &str) -> String {
        self.canon.canonical(surface)
    }

    pub fn encrypt_entity(
        &self,
        surface: &str,
        entity_type: EntityType,
    ) -> Result<CipherToken, CryptoError> {
        let canonical = self.canon.canonical(surface);
        if canonical.is_empty() {
            return Err(CryptoError::EmptySurface);
        }
        let mut data = canonical.into_bytes();
        let pad = BLOCK - data.len() % BLOCK;
        data.resize(data.len() + pad, pad as u8);
        let raw = match self.mode {
            CipherMode::Ecb => {
                self.ecb_encrypt(&mut data);
                data
            }
            CipherMode::Siv => self.siv_seal(&data),
        };
        Ok(CipherToken {
            entity_type,
            payload_b64: STANDARD.encode(raw),
        })
    }

    pub fn decrypt_token(&self, token: &CipherToken) -> DecryptOutcome {
        self.decrypt_payload(&token.payload_b64)
    }

    pub fn decrypt_payload(&self, payload: &str) -> DecryptOutcome {
        let (bytes, repaired) = match STANDARD.decode(payload) {
            Ok(b) => (b, false),
            Err(_) => {
                let (fixed, ok) = repair_base64(payload);
                match (ok, STANDARD.decode(&fixed)) {
                    (true, Ok(b)) => (b, true),
                    _ => {
                        return DecryptOutcome::fail(
                            DecryptStatus::FailBase64,
                            "Base64 decoding failed and could not be repaired",
                        )
                    }
                }
            }
        };
        let min_len = match self.mode {
            CipherMode::Ecb => BLOCK,
            CipherMode::Siv => 2 * BLOCK,
        };
        if bytes.len() < min_len || bytes.len() % BLOCK != 0 {
            return DecryptOutcome::fail(
                DecryptStatus::FailPadding,
                format!("{} bytes is not padded to a multiple of 16 bytes", bytes.len()),
            );
        }
        let mut data = match self.mode {
            CipherMode::Ecb => {
                let mut d = bytes;
                self.ecb_decrypt(&mut d);
                d
            }
            CipherMode::Siv => match self.siv_open(&bytes) {
                Some(d) => d,
                None => {
                    return DecryptOutcome::fail(
                        DecryptStatus::FailPadding,
                        "SIV authentication failed",
                    )
                }
            },
        };
        let pad = data.last().copied().unwrap_or(0) as usize;
        let pad_ok = (1..=BLOCK).contains(&pad)
            && pad <= data.len()
            && data[data.len() - pad..].iter().all(|b| *b as usize == pad);
        if !pad_ok {
            return DecryptOutcome::fail(DecryptStatus::FailPadding, "invalid padding bytes");
        }
        data.truncate(data.len() - pad);
        match String::from_utf8(data) {
            Ok(text) => DecryptOutcome {
                status: if repaired {
                    DecryptStatus::OkRepairedBase64
                } else {
                    DecryptStatus::Ok
                },
                plaintext: Some(text),
                note: if repaired {
                    "appended '=' to realign Base64".into()
                } else {
                    String::new()
                },
            },
            Err(_) => DecryptOutcome::fail(
                DecryptStatus::FailPadding,
                "plaintext is not valid UTF-8",
            ),
        }
    }
}

/// Replaces every span with its token rendering. Spans must be
/// non-overlapping and valid for `doc`; order does not matter.
pub fn rewrite_encrypt(
    doc: &Document,
    spans: &[EntitySpan],
    cipher: &DetCipher,
) -> Result<(Document, Vec<CipherToken>), CryptoError> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(CryptoError::OverlappingSpans(
                pair[0].start,
                pair[0].end,
                pair[1].start,
                pair[1].end,
            ));
        }
    }
    for s in &sorted {
        if s.doc_id != doc.doc_id || !s.is_valid_for(&doc.text) {
            return Err(CryptoError::InvalidSpan {
                doc_id: doc.doc_id.clone(),
                start: s.start,
                end: s.end,
            });
        }
    }
    let tokens: Vec<CipherToken> = sorted
        .iter()
        .map(|s| cipher.encrypt_entity(&s.surface, s.entity_type))
        .collect::<Result<_, _>>()?;
    let idx = CharIndex::new(&doc.text);
    let mut text = doc.text.clone();
    for (span, token) in sorted.iter().zip(&tokens).rev() {
        text.replace_range(idx.to_byte(span.start)..idx.to_byte(span.end), &token.render());
    }
    let mut out = doc.clone();
    out.text = text;
    if !tokens.is_empty() {
        out.meta.insert("key_id".into(), cipher.key().key_id().to_string());
        out.meta.insert("cipher_mode".into(), cipher.mode().to_string());
    }
    Ok((out, tokens))
}

/// Outcome of decrypting one token site in a text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptSite {
    pub rendering: String,
    pub start: usize,
    pub end: usize,
    pub outcome: DecryptOutcome,
}

/// Replaces each decryptable token with its plaintext; failures stay verbatim.
pub fn rewrite_decrypt(text: &str, cipher: &DetCipher) -> (String, Vec<DecryptSite>) {
    let mut out = String::with_capacity(text.len());
    let mut sites = Vec::new();
    let mut last = 0;
    for m in parse_cipher_tokens(text) {
        let outcome = cipher.decrypt_token(&m.token);
        out.push_str(&text[last..m.bytes.start]);
        match &outcome.plaintext {
            Some(p) if outcome.status.is_ok() => out.push_str(p),
            _ => out.push_str(&text[m.bytes.clone()]),
        }
        last = m.bytes.end;
        sites.push(DecryptSite {
            rendering: text[m.bytes.clone()].to_string(),
            start: m.chars.start,
            end: m.chars.end,
            outcome,
        });
    }
    out.push_str(&text[last..]);
    (out, sites)
}
