//! OCR-JSON document schema.
//!
//! Coordinates are pixels `[x0, y0, x1, y1]` on pages of the given size and
//! are normalized to `[0, 1]` on load. One file holds one document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocab};
use super::CorpusError;
use crate::infill::BlockDocument;
use crate::spatial::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrDocument {
    pub doc_id: String,
    pub pages: Vec<OcrPage>,
    #[serde(default)]
    pub annotations: Option<Annotations>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrPage {
    pub width: f64,
    pub height: f64,
    pub blocks: Vec<OcrBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrBlock {
    pub bbox: [f64; 4],
    pub words: Vec<OcrWord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrWord {
    pub text: String,
    pub bbox: [f64; 4],
}

/// Task labels attached to a document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default)]
    pub class_label: Option<String>,
    #[serde(default)]
    pub kie: Vec<KeyValue>,
    #[serde(default)]
    pub vqa: Vec<QaPair>,
    #[serde(default)]
    pub nli: Vec<Statement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub statement: String,
    pub entailed: bool,
}

fn inside(outer: &[f64; 4], inner: &[f64; 4]) -> bool {
    outer[0] <= inner[0] && outer[1] <= inner[1] && outer[2] >= inner[2] && outer[3] >= inner[3]
}

fn well_formed(b: &[f64; 4]) -> bool {
    b.iter().all(|c| c.is_finite()) && b[0] <= b[2] && b[1] <= b[3]
}

/// A word with its normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWord {
    pub text: String,
    pub bbox: BBox,
}

/// Normalized document: blocks of words in reading order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormDocument {
    pub doc_id: String,
    pub blocks: Vec<Vec<NormWord>>,
    pub annotations: Annotations,
}

impl OcrDocument {
    /// Checks box nesting and page bounds; errors name the document and the
    /// offending path.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |path: String, msg: &str| CorpusError::Invalid {
            doc_id: self.doc_id.clone(),
            path,
            msg: msg.to_string(),
        };
        if self.doc_id.is_empty() {
            return Err(err("doc_id".into(), "empty document id"));
        }
        if self.pages.is_empty() {
            return Err(err("pages".into(), "no pages"));
        }
        for (p, page) in self.pages.iter().enumerate() {
            if !(page.width > 0.0 && page.height > 0.0 && page.width.is_finite() && page.height.is_finite()) {
                return Err(err(format!("pages[{p}]"), "page size must be positive"));
            }
            let bounds = [0.0, 0.0, page.width, page.height];
            for (b, block) in page.blocks.iter().enumerate() {
                let path = format!("pages[{p}].blocks[{b}]");
                if !well_formed(&block.bbox) {
                    return Err(err(path, "malformed block box"));
                }
                if !inside(&bounds, &block.bbox) {
                    return Err(err(path, "block box outside page"));
                }
                if block.words.is_empty() {
                    return Err(err(path, "block has no words"));
                }
                for (w, word) in block.words.iter().enumerate() {
                    let wpath = format!("{path}.words[{w}]");
                    if !well_formed(&word.bbox) {
                        return Err(err(wpath, "malformed word box"));
                    }
                    if !inside(&block.bbox, &word.bbox) {
                        return Err(err(wpath, "word box outside its block"));
                    }
                    if tokenize(&word.text).is_empty() {
                        return Err(err(wpath, "word has no text"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let doc: OcrDocument = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialization: fields in declaration order, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Validates and maps pixel boxes into `[0, 1]`. Pages are concatenated.
    pub fn normalize(&self) -> Result<NormDocument, CorpusError> {
        self.validate()?;
        let mut blocks = Vec::new();
        for (p, page) in self.pages.iter().enumerate() {
            let norm = |b: &[f64; 4], path: String| -> Result<BBox, CorpusError> {
                BBox::new(
                    b[0] / page.width,
                    b[1] / page.height,
                    b[2] / page.width,
                    b[3] / page.height,
                )
                .map_err(|e| CorpusError::Invalid {
                    doc_id: self.doc_id.clone(),
                    path,
                    msg: e.to_string(),
                })
            };
            for (b, block) in page.blocks.iter().enumerate() {
                let words = block
                    .words
                    .iter()
                    .enumerate()
                    .map(|(w, word)| {
                        Ok(NormWord {
                            text: word.text.clone(),
                            bbox: norm(&word.bbox, format!("pages[{p}].blocks[{b}].words[{w}]"))?,
                        })
                    })
                    .collect::<Result<Vec<_>, CorpusError>>()?;
                blocks.push(words);
            }
        }
        Ok(NormDocument {
            doc_id: self.doc_id.clone(),
            blocks,
            annotations: self.annotations.clone().unwrap_or_default(),
        })
    }
}

impl NormDocument {
    /// Tokens with per-token boxes; each OCR block becomes one block. A word
    /// that splits into several tokens gives each token the word's box.
    pub fn to_block_document(&self, vocab: &Vocab) -> Result<BlockDocument, CorpusError> {
        let mut tokens = Vec::new();
        let mut boxes = Vec::new();
        let mut spans = Vec::new();
        for block in &self.blocks {
            let start = tokens.len();
            for word in block {
                for piece in tokenize(&word.text) {
                    tokens.push(vocab.id(piece));
                    boxes.push(word.bbox);
                }
            }
            spans.push((start, tokens.len()));
        }
        Ok(BlockDocument::new(self.doc_id.clone(), tokens, boxes, &spans)?)
    }

    /// Document text as the space-joined word stream.
    pub fn text(&self) -> String {
        self.blocks
            .iter()
            .flatten()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> OcrDocument {
        OcrDocument {
            doc_id: "d1".into(),
            pages: vec![OcrPage {
                width: 1000.0,
                height: 2000.0,
                blocks: vec![
                    OcrBlock {
                        bbox: [100.0, 100.0, 500.0, 200.0],
                        words: vec![
                            OcrWord {
                                text: "Name".into(),
                                bbox: [100.0, 100.0, 250.0, 200.0],
                            },
                            OcrWord {
                                text: "x:".into(),
                                bbox: [300.0, 100.0, 500.0, 200.0],
                            },
                        ],
                    },
                    OcrBlock {
                        bbox: [0.0, 1900.0, 1000.0, 2000.0],
                        words: vec![OcrWord {
                            text: "end".into(),
                            bbox: [0.0, 1900.0, 1000.0, 2000.0],
                        }],
                    },
                ],
            }],
            annotations: None,
        }
    }

    #[test]
    fn normalizes_into_unit_square() {
        let n = doc().normalize().unwrap();
        assert_eq!(n.blocks.len(), 2);
        assert_eq!(n.blocks[0][0].bbox, BBox::new(0.1, 0.05, 0.25, 0.1).unwrap());
        assert_eq!(n.blocks[1][0].bbox, BBox::new(0.0, 0.95, 1.0, 1.0).unwrap());
    }

    #[test]
    fn nesting_violations_name_the_path() {
        let mut d = doc();
        d.pages[0].blocks[0].words[1].bbox[2] = 600.0;
        let e = d.validate().unwrap_err();
        assert!(e.to_string().contains("d1"), "{e}");
        assert!(e.to_string().contains("pages[0].blocks[0].words[1]"), "{e}");
        let mut d = doc();
        d.pages[0].blocks[1].bbox[3] = 2001.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn json_round_trip_is_idempotent() {
        let mut d = doc();
        d.annotations = Some(Annotations {
            class_label: Some("form".into()),
            kie: vec![KeyValue {
                key: "Name".into(),
                value: "x".into(),
            }],
            ..Annotations::default()
        });
        let once = d.to_json();
        let back = OcrDocument::from_json(&once).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_json(), once);
    }

    #[test]
    fn split_words_share_boxes() {
        let v = Vocab::new(vec!["Name".into(), "x".into(), ":".into(), "end".into()]).unwrap();
        let b = doc().normalize().unwrap().to_block_document(&v).unwrap();
        assert_eq!(b.tokens, vec![0, 1, 2, 3]);
        assert_eq!(b.boxes[1], b.boxes[2]);
        assert_eq!(b.blocks.len(), 2);
        assert_eq!((b.blocks[0].start, b.blocks[0].end), (0, 3));
    }
}
