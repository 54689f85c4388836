use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word-level vocabulary. Ids `0..4` are pad, bos, eos and unk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved symbols followed by `content_size` synthetic symbols `t0, t1, …`.
    pub fn synthetic(content_size: usize) -> Result<Self> {
        if content_size == 0 {
            return Err(Error::Config("vocabulary needs at least one content symbol".into()));
        }
        Self::from_words((0..content_size).map(|i| format!("t{i}")))
    }

    /// Reserved symbols followed by `words` in first-seen order (duplicates skipped).
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED {
            v.push(w.to_string());
        }
        for w in words {
            let w = w.into();
            if RESERVED.contains(&w.as_str()) {
                return Err(Error::Data(format!("content word {w:?} collides with a reserved symbol")));
            }
            v.push(w);
        }
        if v.len() == NUM_RESERVED {
            return Err(Error::Config("vocabulary needs at least one content symbol".into()));
        }
        Ok(v)
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// First content id.
    pub fn content_start(&self) -> usize {
        NUM_RESERVED
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace tokenisation; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
