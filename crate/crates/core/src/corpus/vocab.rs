//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::infill::SpecialVocab;

/// Splits text into word and punctuation tokens: `\w+` runs, and every other
/// non-space character on its own.
pub fn tokenize(text: &str) -> Vec<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static pattern"))
        .find_iter(text)
        .map(|m| m.as_str())
        .collect()
}

/// Text words with ids `0..len`, followed by the special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    specials: SpecialVocab,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = CorpusError;

    fn try_from(f: VocabFile) -> Result<Self, Self::Error> {
        Vocab::new(f.words)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { words: v.words }
    }
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || tokenize(w) != [w.as_str()] {
                return Err(CorpusError::Vocab(format!("`{w}` is not a single token")));
            }
            if SpecialVocab::NAMES.contains(&w.as_str()) {
                return Err(CorpusError::Vocab(format!("`{w}` is reserved")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate word `{w}`")));
            }
        }
        let specials = SpecialVocab::after(words.len() as u32);
        Ok(Self {
            words,
            index,
            specials,
        })
    }

    /// Number of text words.
    pub fn text_len(&self) -> usize {
        self.words.len()
    }

    /// Text words plus specials; the model's output size.
    pub fn size(&self) -> usize {
        self.specials.vocab_size()
    }

    pub fn specials(&self) -> &SpecialVocab {
        &self.specials
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or `[UNK]`.
    pub fn id(&self, word: &str) -> u32 {
        self.get(word).unwrap_or(self.specials.unk)
    }

    pub fn word(&self, id: u32) -> &str {
        match self.words.get(id as usize) {
            Some(w) => w,
            None => {
                let k = id.wrapping_sub(self.specials.pad) as usize;
                SpecialVocab::NAMES.get(k).copied().unwrap_or("[?]")
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined words.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// `decode(encode(text))`: the canonical spelling used for string
    /// comparisons against decoded model output.
    pub fn canonical(&self, text: &str) -> String {
        self.decode(&self.encode(text))
    }
}
