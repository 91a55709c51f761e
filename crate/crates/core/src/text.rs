//! Word-level vocabulary and tokenizer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Decoder start token.
pub const DEC: usize = 2;
pub const EOS: usize = 3;

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[DEC]", "[EOS]"];

/// Prompt that opens every generated summary.
pub const DEFAULT_PROMPT: &str = "[DEC] a video of";

/// Lower-cases `text`, drops punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .flat_map(normalize_piece)
        .collect()
}

fn normalize_piece(piece: &str) -> Vec<String> {
    piece
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Dense token ↔ id mapping. Ids `0..4` are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(SPECIALS.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from training texts. Words are ordered by
    /// descending frequency, then alphabetically; the prompt words are always
    /// present.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in normalize_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::default();
        for piece in DEFAULT_PROMPT.split_whitespace() {
            if !SPECIALS.contains(&piece) {
                normalize_piece(piece).into_iter().for_each(|w| vocab.push(w));
            }
        }
        for (w, _) in words {
            vocab.push(w);
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids for `text`. Special tokens written literally (`[DEC]`) map to
    /// their ids; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for piece in text.split_whitespace() {
            if let Some(pos) = SPECIALS.iter().position(|s| *s == piece) {
                ids.push(pos);
                continue;
            }
            for w in normalize_piece(piece) {
                ids.push(self.id(&w).unwrap_or(UNK));
            }
        }
        ids
    }

    /// Space-joined tokens, skipping `[PAD]` and `[EOS]`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
