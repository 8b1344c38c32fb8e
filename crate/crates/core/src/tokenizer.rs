//! Word-level tokenizer and the growable vocabulary shared across tables.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[pad]";
pub const CLS_TOKEN: &str = "[cls]";
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
/// Ids `[len, len + OVERFLOW_BUCKETS)` hold hashed unknown tokens.
pub const OVERFLOW_BUCKETS: usize = 1000;

/// Lowercases, turns every non-alphanumeric character into a separator and
/// splits into words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub source_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        };
        v.push(PAD_TOKEN);
        v.push(CLS_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Known-region size; overflow ids start here.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Overflow id for a token outside the known region.
    pub fn overflow_id(&self, token: &str) -> usize {
        self.len() + overflow_bucket(token)
    }

    pub fn encode(&mut self, tokens: &[String], allow_grow: bool) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| match self.id(t) {
                Some(id) => id,
                None if allow_grow && !self.frozen => self.push(t),
                None => self.overflow_id(t),
            })
            .collect()
    }

    /// Lookup that never grows, for shared read-only use.
    pub fn encode_frozen(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or_else(|| self.overflow_id(t)))
            .collect()
    }

    pub fn encode_text(&mut self, text: &str, allow_grow: bool) -> TokenSequence {
        let ids = self.encode(&tokenize(text), allow_grow);
        TokenSequence {
            ids,
            source_text: text.to_string(),
        }
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != CLS_TOKEN {
            return Err(Error::Checkpoint(
                "vocabulary must start with [pad] and [cls]".into(),
            ));
        }
        let mut v = Vocabulary::new();
        for (i, line) in lines.iter().enumerate().skip(2) {
            if line.is_empty() || v.index.contains_key(*line) {
                return Err(Error::Checkpoint(format!(
                    "vocabulary line {}: empty or duplicate token `{line}`",
                    i + 1
                )));
            }
            v.push(line);
        }
        Ok(v)
    }
}

/// FNV-1a bucket in `[0, OVERFLOW_BUCKETS)`.
pub fn overflow_bucket(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % OVERFLOW_BUCKETS as u64) as usize
}
