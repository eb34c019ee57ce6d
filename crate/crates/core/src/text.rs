//! Tokenisation, vocabulary and batch encoding for transcripts.
//!
//! CJK ideographs become one token each; every other run of text is
//! lowercased and split on whitespace and punctuation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::text::TextInput;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const RESERVED: usize = 2;
/// Default truncation cap in tokens.
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("transcript is empty after tokenisation")]
    EmptyTranscript,
    #[error("transcript {index} is empty after tokenisation")]
    EmptyTranscriptAt { index: usize },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
    #[error("vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c as u32, 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20)
}

/// Surface tokens of one transcript, in order.
pub fn tokenize(transcript: &str) -> Result<Vec<String>, TextError> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in transcript.chars() {
        if is_cjk(c) || is_separator(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if is_cjk(c) {
                tokens.push(c.to_string());
            }
        } else {
            word.extend(c.to_lowercase());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    if tokens.is_empty() {
        Err(TextError::EmptyTranscript)
    } else {
        Ok(tokens)
    }
}

/// Token ↔ id map with `PAD = 0`, `UNK = 1` implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens in id order starting at id 2.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(format!("line {}: token must be non-empty without whitespace", i + 1));
            }
            if index.insert(t.clone(), i + RESERVED).is_some() {
                return Err(format!("line {}: duplicate token `{t}`", i + 1));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens with frequency `≥ min_count`, most frequent first, ties
    /// broken lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = false;
        for line in corpus {
            seen = true;
            // transcripts that tokenize empty contribute nothing
            if let Ok(tokens) = tokenize(line.as_ref()) {
                for t in tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        if !seen {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect()).expect("tokens are unique"))
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    /// Always false: PAD and UNK are present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            _ => self.tokens.get(id - RESERVED).map(String::as_str),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>, TextError> {
        Ok(tokenize(transcript)?.iter().map(|t| self.id(t)).collect())
    }

    /// Token strings for ids, dropping padding.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// File form: one token per line, line `n` (from 1) holds id `n + 1`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// SHA-256 of [`Vocabulary::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_text()).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text).map_err(|reason| TextError::BadVocabFile {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Right-padded id matrix with `len = min(max_len, longest)`; truncation
/// keeps the prefix.
pub fn encode_batch<S: AsRef<str>>(transcripts: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TextInput, TextError> {
    let mut rows = Vec::with_capacity(transcripts.len());
    for (index, t) in transcripts.iter().enumerate() {
        let mut ids = vocab.encode(t.as_ref()).map_err(|_| TextError::EmptyTranscriptAt { index })?;
        ids.truncate(max_len.max(1));
        rows.push(ids);
    }
    if rows.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let len = rows.iter().map(Vec::len).max().expect("non-empty");
    let mut ids = Vec::with_capacity(rows.len() * len);
    let mut lengths = Vec::with_capacity(rows.len());
    for r in &rows {
        lengths.push(r.len());
        ids.extend_from_slice(r);
        ids.extend(std::iter::repeat_n(PAD, len - r.len()));
    }
    Ok(TextInput::new(ids, rows.len(), len, lengths).expect("consistent by construction"))
}
