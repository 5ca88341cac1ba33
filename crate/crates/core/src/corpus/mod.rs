//! Documents: the OCR-JSON schema, the tokenizer vocabulary and the synthetic
//! layout-document generator.

use std::fmt;

pub mod ocr;
pub mod synth;
pub mod vocab;

pub use ocr::{Annotations, KeyValue, NormDocument, OcrBlock, OcrDocument, OcrPage, OcrWord, QaPair, Statement};
pub use synth::{generate_corpus, read_corpus, write_corpus, Corpus, Family, Lexicon, SynthesisConfig};
pub use vocab::{tokenize, Vocab};

use crate::infill::{BlockDocument, InfillError};

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusError {
    /// A document violates the schema; `path` locates the offending field.
    Invalid { doc_id: String, path: String, msg: String },
    Vocab(String),
    Json(String),
    Io(String),
    Infill(InfillError),
    Config(String),
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Invalid { doc_id, path, msg } => write!(f, "{doc_id}: {path}: {msg}"),
            Self::Vocab(msg) => write!(f, "vocabulary: {msg}"),
            Self::Json(msg) => write!(f, "json: {msg}"),
            Self::Io(msg) => write!(f, "io: {msg}"),
            Self::Infill(e) => write!(f, "{e}"),
            Self::Config(msg) => write!(f, "synthesis config: {msg}"),
        }
    }
}

impl std::error::Error for CorpusError {}

impl From<serde_json::Error> for CorpusError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e.to_string())
    }
}

impl From<InfillError> for CorpusError {
    fn from(e: InfillError) -> Self {
        Self::Infill(e)
    }
}

/// Normalizes and tokenizes documents for pre-training.
pub fn block_documents(docs: &[OcrDocument], vocab: &Vocab) -> Result<Vec<BlockDocument>, CorpusError> {
    docs.iter()
        .map(|d| d.normalize()?.to_block_document(vocab))
        .collect()
}
