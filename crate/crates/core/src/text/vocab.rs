use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const CLS: usize = 4;
pub const SEP: usize = 5;
pub const EMPTY: usize = 6;

const SPECIALS: [&str; 7] = ["<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<sep>", "<empty>"];

/// Inference dimensions (the ATOMIC relation set, which contains the
/// Event2Mind ones).
pub const DIMENSIONS: [&str; 9] =
    ["oEffect", "oReact", "oWant", "xAttr", "xEffect", "xIntent", "xNeed", "xReact", "xWant"];

/// Word-level vocabulary. Ids `0..SPECIALS.len()` are the structural tokens,
/// followed by one id per inference dimension, followed by corpus words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from token streams. Words are ordered by
    /// descending count, then lexicographically, so the result depends only
    /// on the multiset of tokens and `min_count`.
    pub fn build<'a, I, S>(sequences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w.to_string()))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(DIMENSIONS.iter().map(|d| format!("<{d}>")));
        tokens.extend(words);
        let to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { to_id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first_word_id(&self) -> usize {
        SPECIALS.len() + DIMENSIONS.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Space-joined surface form, skipping reserved tokens.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| !self.is_reserved(i)).map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.first_word_id()
    }

    pub fn dimension_id(&self, tag: &str) -> Result<usize> {
        DIMENSIONS
            .iter()
            .position(|d| *d == tag)
            .map(|i| SPECIALS.len() + i)
            .ok_or_else(|| Error::UnknownDimension { tag: tag.to_string(), valid: DIMENSIONS.join(", ") })
    }

    pub fn dimension_name(&self, id: usize) -> Option<&'static str> {
        id.checked_sub(SPECIALS.len()).and_then(|i| DIMENSIONS.get(i)).copied()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens[self.first_word_id()..].join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v = Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string));
        if v.to_id.len() != v.tokens.len() {
            return Err(Error::Checkpoint("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }
}
