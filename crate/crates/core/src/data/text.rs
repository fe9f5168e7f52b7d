use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Lowercases, drops every character outside `[a-z0-9.,]` and whitespace,
/// and splits `.` and `,` into standalone tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars().flat_map(char::to_lowercase) {
        match ch {
            'a'..='z' | '0'..='9' => spaced.push(ch),
            '.' | ',' => {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            }
            c if c.is_whitespace() => spaced.push(' '),
            _ => {}
        }
    }
    spaced.split_whitespace().map(str::to_owned).collect()
}

/// Normalized text as a single space-joined string.
pub fn normalize_text(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// Word/id bijection. Ids `0..5` are the special tokens, words follow in
/// descending frequency with lexicographic tie-break.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    #[serde(skip)]
    word_to_id: HashMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(reports: &[S], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for report in reports {
            for tok in normalize_tokens(report.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let id_to_word = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_words(id_to_word, min_count))
    }

    fn from_words(id_to_word: Vec<String>, min_count: usize) -> Self {
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            id_to_word,
            word_to_id,
            min_count,
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(json)?;
        if raw.id_to_word.len() < SPECIAL_TOKENS.len()
            || raw.id_to_word[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(Error::Checkpoint("vocabulary lacks special tokens".into()));
        }
        Ok(Self::from_words(raw.id_to_word, raw.min_count))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.len() == SPECIAL_TOKENS.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_word.get(id as usize).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[SPECIAL_TOKENS.len()..]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn tokenize(&self, report: &str, max_len: usize) -> Result<TokenizedReport> {
        tokenize(report, self, max_len)
    }

    /// Words up to the first eos, skipping special ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if Self::is_special(id) && id != UNK {
                continue;
            }
            if let Some(w) = self.word(id) {
                words.push(w);
            }
        }
        words.join(" ")
    }
}

/// Token ids padded to `max_len`; `length` counts the non-pad prefix
/// including bos and eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedReport {
    pub ids: Vec<u32>,
    pub length: usize,
}

impl TokenizedReport {
    /// The non-pad part `ids[..length]`.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

pub fn tokenize(report: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedReport> {
    if max_len < 3 {
        return Err(Error::invalid(format!(
            "max_len must be >= 3, got {max_len}"
        )));
    }
    let words = normalize_tokens(report);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        words
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(EOS);
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenizedReport { ids, length })
}
