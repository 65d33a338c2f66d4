//! Token-id corpora and GPT-2 vocabulary decoding.
//!
//! Text always arrives pre-tokenized. The vocabulary file is the published
//! `token-string → id` JSON map whose keys use GPT-2's byte-to-unicode
//! alphabet; decoding maps those characters back to raw bytes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids plus a free-form label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub label: String,
    #[serde(rename = "tokens")]
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(label: impl Into<String>, ids: Vec<usize>) -> Self {
        TokenSeq {
            label: label.into(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy with `token` written at position `n` (0-based).
    pub fn substituted(&self, n: usize, token: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids[n] = token;
        TokenSeq {
            label: self.label.clone(),
            ids,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<TokenSeq>,
    pub source: PathBuf,
    /// One entry per rejected (too short) line.
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct CorpusLine {
    #[serde(default)]
    label: String,
    tokens: Vec<i64>,
}

/// Read a JSON-lines corpus of `{"label": ..., "tokens": [...]}` records.
///
/// Lines shorter than `min_len` are dropped with a warning; any id outside
/// `0..d_voc` is a [`Error::MalformedLine`].
pub fn load_corpus(path: &Path, min_len: usize, d_voc: usize) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, min_len, d_voc)
}

pub fn parse_corpus(text: &str, source: &Path, min_len: usize, d_voc: usize) -> Result<Corpus> {
    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if rec.tokens.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty token list".into(),
            });
        }
        let mut ids = Vec::with_capacity(rec.tokens.len());
        for &t in &rec.tokens {
            if t < 0 || t as u64 >= d_voc as u64 {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: format!("token id {t} outside 0..{d_voc}"),
                });
            }
            ids.push(t as usize);
        }
        if ids.len() < min_len {
            warnings.push(format!(
                "line {line_no}: {} tokens < minimum {min_len}, skipped",
                ids.len()
            ));
            continue;
        }
        let label = if rec.label.is_empty() {
            format!("line-{line_no}")
        } else {
            rec.label
        };
        sequences.push(TokenSeq { label, ids });
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        sequences,
        source: source.to_path_buf(),
        warnings,
    })
}

/// GPT-2's reversible byte → printable-character table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0u32..256 {
        let c = if printable(b) {
            b
        } else {
            let c = 256 + extra;
            extra += 1;
            c
        };
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_bytes: Vec<Vec<u8>>,
    byte_decoder: HashMap<char, u8>,
    by_display: HashMap<String, usize>,
}

impl Vocab {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, usize> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_encoder(map).map_err(|reason| Error::Config(format!("{}: {reason}", path.display())))
    }

    /// Build from the `token-string → id` map; ids must be exactly `0..len`.
    pub fn from_encoder(map: HashMap<String, usize>) -> std::result::Result<Self, String> {
        let encoder = bytes_to_unicode();
        let byte_decoder: HashMap<char, u8> = encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut id_to_bytes: Vec<Option<Vec<u8>>> = vec![None; map.len()];
        for (token, &id) in &map {
            let slot = id_to_bytes
                .get_mut(id)
                .ok_or_else(|| format!("id {id} exceeds vocabulary size {}", map.len()))?;
            if slot.is_some() {
                return Err(format!("id {id} assigned twice"));
            }
            // Special tokens such as <|endoftext|> are stored verbatim.
            let bytes = token
                .chars()
                .map(|c| byte_decoder.get(&c).copied())
                .collect::<Option<Vec<u8>>>()
                .unwrap_or_else(|| token.as_bytes().to_vec());
            *slot = Some(bytes);
        }
        let id_to_bytes: Vec<Vec<u8>> = id_to_bytes
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.ok_or_else(|| format!("id {i} missing")))
            .collect::<std::result::Result<_, _>>()?;
        let mut by_display = HashMap::new();
        for (id, bytes) in id_to_bytes.iter().enumerate() {
            if let Ok(s) = std::str::from_utf8(bytes) {
                by_display.entry(s.to_string()).or_insert(id);
            }
        }
        Ok(Vocab {
            id_to_bytes,
            byte_decoder,
            by_display,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_bytes.is_empty()
    }

    pub fn token_bytes(&self, id: usize) -> Result<&[u8]> {
        self.id_to_bytes
            .get(id)
            .map(Vec::as_slice)
            .ok_or(Error::IdOutOfRange { id, d_voc: self.len() })
    }

    /// Display string for `id`, leading space kept.
    ///
    /// Tokens holding a partial UTF-8 sequence render with U+FFFD, so a few
    /// distinct ids share a display string.
    pub fn decode_token(&self, id: usize) -> Result<String> {
        Ok(String::from_utf8_lossy(self.token_bytes(id)?).into_owned())
    }

    /// Id of the token whose decoded text is exactly `text`.
    pub fn lookup(&self, text: &str) -> Option<usize> {
        self.by_display.get(text).copied()
    }

    /// Resolve a command-line token argument: an all-digit string is a raw
    /// id, anything else is matched against decoded token text.
    pub fn resolve(&self, arg: &str) -> Result<usize> {
        if !arg.is_empty() && arg.bytes().all(|b| b.is_ascii_digit()) {
            let id: usize = arg.parse().map_err(|_| Error::Config(format!("bad token id {arg}")))?;
            self.token_bytes(id)?;
            return Ok(id);
        }
        self.lookup(arg)
            .ok_or_else(|| Error::Config(format!("token {arg:?} not in vocabulary")))
    }

    /// Undo the byte-level alphabet of a raw vocabulary key.
    pub fn unmap_key(&self, key: &str) -> Option<Vec<u8>> {
        key.chars().map(|c| self.byte_decoder.get(&c).copied()).collect()
    }
}

/// The English stop-word list shipped with the crate.
pub const STOP_WORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// Stop words mapped to token ids (with and without leading space, lower
/// and capitalized).
#[derive(Debug, Clone)]
pub struct StopWords {
    ids: HashSet<usize>,
}

impl StopWords {
    pub fn english(vocab: &Vocab) -> Self {
        Self::from_words(vocab, STOP_WORDS_EN.lines())
    }

    pub fn from_words<'a>(vocab: &Vocab, words: impl Iterator<Item = &'a str>) -> Self {
        let mut ids = HashSet::new();
        for w in words.map(str::trim).filter(|w| !w.is_empty()) {
            let mut cap = w.to_string();
            if let Some(first) = cap.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            for form in [w.to_string(), format!(" {w}"), cap.clone(), format!(" {cap}")] {
                if let Some(id) = vocab.lookup(&form) {
                    ids.insert(id);
                }
            }
        }
        StopWords { ids }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        StopWords {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fraction of `seq` made of stop-word tokens.
    pub fn density(&self, seq: &[usize]) -> f64 {
        if seq.is_empty() {
            return 0.0;
        }
        seq.iter().filter(|id| self.ids.contains(id)).count() as f64 / seq.len() as f64
    }
}
