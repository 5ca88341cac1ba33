//! Synthetic layout documents with a known relation between position and
//! content.
//!
//! * `form`: a two-column key/value grid. Keys are single words in the left
//!   column, values are 1 to 3 words on the same row in the right column. The
//!   first value word is one of two options fixed per key and the remaining
//!   words follow from the first. OCR reading order is column-major (all
//!   keys, then all values), so the key of a value sits on its row, not next
//!   to it in the text. Some fields are left empty, so counting values does
//!   not give the row.
//! * `table`: a header row and labelled rows; each column draws its cells
//!   from its own pool, so the column position predicts the token class.
//! * `letter`: paragraphs of running text with a signature block.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ocr::{Annotations, KeyValue, OcrBlock, OcrDocument, OcrPage, OcrWord, QaPair, Statement};
use super::vocab::Vocab;
use super::CorpusError;
use crate::infill::derive_seed;
use crate::instruct::TEMPLATE_WORDS;

pub const PAGE_WIDTH: f64 = 1000.0;
pub const PAGE_HEIGHT: f64 = 1400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Form,
    Table,
    Letter,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Form, Family::Table, Family::Letter];

    pub fn name(self) -> &'static str {
        match self {
            Family::Form => "form",
            Family::Table => "table",
            Family::Letter => "letter",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown layout family `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub seed: u64,
    /// Training documents.
    pub n_docs: usize,
    /// Held-out documents, disjoint from training.
    pub n_heldout: usize,
    /// Families are assigned round-robin by document index.
    pub families: Vec<Family>,
    /// Content words; template words are added on top.
    pub vocab_size: usize,
    /// Maximum box shift as a fraction of the word height.
    pub jitter: f64,
    /// Probability of dropping a word (never the last word of a block).
    pub dropout: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 2000,
            n_heldout: 200,
            families: Family::ALL.to_vec(),
            vocab_size: 512,
            jitter: 0.0,
            dropout: 0.0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab_size < 32 {
            return Err(CorpusError::Config(format!(
                "vocab_size {} is below the minimum of 32",
                self.vocab_size
            )));
        }
        if self.families.is_empty() {
            return Err(CorpusError::Config("no layout families".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) || !(0.0..1.0).contains(&self.dropout) {
            return Err(CorpusError::Config(format!(
                "jitter {} / dropout {} out of range",
                self.jitter, self.dropout
            )));
        }
        Ok(())
    }
}

/// Word pools carved out of the content vocabulary, and the fixed relations
/// between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub keys: Vec<String>,
    /// Two options per key: `first_values[2k]`, `first_values[2k + 1]`.
    pub first_values: Vec<String>,
    pub second_values: Vec<String>,
    pub third_values: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[c]` is the pool of column type `c`.
    pub cells: Vec<Vec<String>>,
    pub row_labels: Vec<String>,
    pub letter_words: Vec<String>,
}

impl Lexicon {
    pub fn new(vocab_size: usize) -> Result<Self, CorpusError> {
        if vocab_size < 32 {
            return Err(CorpusError::Config(format!("vocab_size {vocab_size} < 32")));
        }
        let n_keys = (vocab_size / 8).max(4);
        let n_first = 2 * n_keys;
        let n_second = (vocab_size / 16).max(2);
        let n_third = (vocab_size / 32).max(1);
        let n_cols = (vocab_size / 64).max(2);
        let per_col = (vocab_size / 64).max(4);
        let n_rows = (vocab_size / 16).max(2);
        let used = n_keys + n_first + n_second + n_third + n_cols + n_cols * per_col + n_rows;
        if used >= vocab_size {
            return Err(CorpusError::Config(format!(
                "vocab_size {vocab_size} leaves no letter words"
            )));
        }
        let pool = |prefix: &str, n: usize| -> Vec<String> {
            (0..n).map(|i| format!("{prefix}{i}")).collect()
        };
        Ok(Self {
            keys: pool("key", n_keys),
            first_values: pool("val", n_first),
            second_values: pool("sfx", n_second),
            third_values: pool("end", n_third),
            columns: pool("col", n_cols),
            cells: (0..n_cols).map(|c| pool(&format!("c{c}x"), per_col)).collect(),
            row_labels: pool("item", n_rows),
            letter_words: pool("w", vocab_size - used),
        })
    }

    pub fn content_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.keys.iter().cloned());
        out.extend(self.first_values.iter().cloned());
        out.extend(self.second_values.iter().cloned());
        out.extend(self.third_values.iter().cloned());
        out.extend(self.columns.iter().cloned());
        for c in &self.cells {
            out.extend(c.iter().cloned());
        }
        out.extend(self.row_labels.iter().cloned());
        out.extend(self.letter_words.iter().cloned());
        out
    }

    /// The value words of key `k` choosing first-word option `option`, cut to
    /// `len` words.
    pub fn value_words(&self, k: usize, option: usize, len: usize) -> Vec<&str> {
        let first = 2 * k + option;
        let words = [
            self.first_values[first].as_str(),
            self.second_values[first % self.second_values.len()].as_str(),
            self.third_values[(first * 5 + 1) % self.third_values.len()].as_str(),
        ];
        words[..len].to_vec()
    }

    /// Template words followed by content words.
    pub fn vocab(&self) -> Result<Vocab, CorpusError> {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(Family::ALL.iter().map(|f| f.name().to_string()));
        words.extend(self.content_words());
        Vocab::new(words)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<OcrDocument>,
    pub heldout: Vec<OcrDocument>,
}

/// Generates the corpus. Each document is seeded from `(seed, doc_id)`, so
/// documents are independent of each other and of generation order.
pub fn generate_corpus(cfg: &SynthesisConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg.vocab_size)?;
    let vocab = lex.vocab()?;
    let make = |i: usize| {
        let family = cfg.families[i % cfg.families.len()];
        let doc_id = format!("{}-{i:05}", family.name());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &doc_id));
        generate_document(&lex, family, doc_id, cfg, &mut rng)
    };
    let train = (0..cfg.n_docs).map(make).collect();
    let heldout = (cfg.n_docs..cfg.n_docs + cfg.n_heldout).map(make).collect();
    Ok(Corpus {
        vocab,
        train,
        heldout,
    })
}

/// Writes `vocab.json`, `train/<doc_id>.json` and `test/<doc_id>.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    let io = |e: std::io::Error| CorpusError::Io(format!("{}: {e}", dir.display()));
    for (split, docs) in [("train", &corpus.train), ("test", &corpus.heldout)] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(io)?;
        for d in docs {
            std::fs::write(sub.join(format!("{}.json", d.doc_id)), d.to_json()).map_err(io)?;
        }
    }
    let vocab = serde_json::to_string_pretty(&corpus.vocab)?;
    std::fs::write(dir.join("vocab.json"), vocab).map_err(io)?;
    Ok(())
}

/// Reads a directory written by [`write_corpus`]. Documents are ordered by
/// the number after the last `-` of their file name, then by name, which
/// restores generation order for generated corpora.
pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let io = |e: std::io::Error| CorpusError::Io(format!("{}: {e}", dir.display()));
    let vocab_text = std::fs::read_to_string(dir.join("vocab.json")).map_err(io)?;
    let vocab: Vocab = serde_json::from_str(&vocab_text)?;
    let read_split = |split: &str| -> Result<Vec<OcrDocument>, CorpusError> {
        let sub = dir.join(split);
        if !sub.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<_> = std::fs::read_dir(&sub)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort_by_cached_key(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let index = stem.rsplit('-').next().and_then(|n| n.parse::<u64>().ok());
            (index.is_none(), index, stem)
        });
        paths.iter().map(|p| OcrDocument::load(p)).collect()
    };
    Ok(Corpus {
        vocab,
        train: read_split("train")?,
        heldout: read_split("test")?,
    })
}

struct Builder<'a, R> {
    rng: &'a mut R,
    cfg: &'a SynthesisConfig,
    blocks: Vec<OcrBlock>,
}

impl<R: Rng> Builder<'_, R> {
    /// Adds one block of `(word, x0, y0, x1, y1)` entries in page pixels.
    fn block(&mut self, words: &[(&str, f64, f64, f64, f64)]) {
        let mut kept: Vec<OcrWord> = Vec::with_capacity(words.len());
        for (i, &(text, x0, y0, x1, y1)) in words.iter().enumerate() {
            let remaining = words.len() - i;
            if kept.is_empty() && remaining == 1 {
                // The last chance to keep a word in this block.
            } else if self.cfg.dropout > 0.0 && self.rng.gen_bool(self.cfg.dropout) {
                continue;
            }
            let (dx, dy) = if self.cfg.jitter > 0.0 {
                let amp = self.cfg.jitter * (y1 - y0);
                (self.rng.gen_range(-amp..=amp), self.rng.gen_range(-amp..=amp))
            } else {
                (0.0, 0.0)
            };
            let dx = dx.clamp(-x0, PAGE_WIDTH - x1);
            let dy = dy.clamp(-y0, PAGE_HEIGHT - y1);
            kept.push(OcrWord {
                text: text.to_string(),
                bbox: [
                    (x0 + dx).round(),
                    (y0 + dy).round(),
                    (x1 + dx).round(),
                    (y1 + dy).round(),
                ],
            });
        }
        let bbox = kept.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |b, w| {
            [
                b[0].min(w.bbox[0]),
                b[1].min(w.bbox[1]),
                b[2].max(w.bbox[2]),
                b[3].max(w.bbox[3]),
            ]
        });
        self.blocks.push(OcrBlock { bbox, words: kept });
    }
}

fn generate_document<R: Rng>(
    lex: &Lexicon,
    family: Family,
    doc_id: String,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> OcrDocument {
    let mut annotations = Annotations {
        class_label: Some(family.name().to_string()),
        ..Annotations::default()
    };
    let blocks = {
        let mut b = Builder {
            rng,
            cfg,
            blocks: Vec::new(),
        };
        match family {
            Family::Form => form(lex, &mut b, &mut annotations),
            Family::Table => table(lex, &mut b, &mut annotations),
            Family::Letter => letter(lex, &mut b),
        }
        b.blocks
    };
    OcrDocument {
        doc_id,
        pages: vec![OcrPage {
            width: PAGE_WIDTH,
            height: PAGE_HEIGHT,
            blocks,
        }],
        annotations: Some(annotations),
    }
}

pub const FORM_MIN_ROWS: usize = 4;
pub const FORM_MAX_ROWS: usize = 8;
/// Probability that a form field has a value; empty fields keep their key.
pub const FORM_FILL_RATE: f64 = 0.75;
const FORM_TOP: f64 = 140.0;
const FORM_ROW_PITCH: f64 = 112.0;
const FORM_ROW_HEIGHT: f64 = 56.0;
const FORM_KEY_X: (f64, f64) = (80.0, 200.0);
const FORM_VALUE_X: f64 = 450.0;
const FORM_VALUE_PITCH: f64 = 120.0;
const FORM_VALUE_WIDTH: f64 = 100.0;

fn form<R: Rng>(lex: &Lexicon, b: &mut Builder<'_, R>, ann: &mut Annotations) {
    let n = lex.keys.len();
    let rows = b.rng.gen_range(FORM_MIN_ROWS.min(n)..=FORM_MAX_ROWS.min(n));
    let keys = sample(b.rng, lex.keys.len(), rows).into_vec();
    let mut values = Vec::with_capacity(rows);
    for &k in &keys {
        let option = b.rng.gen_range(0..2);
        let len = b.rng.gen_range(1..=3);
        let filled = b.rng.gen_bool(FORM_FILL_RATE);
        values.push(filled.then(|| lex.value_words(k, option, len)));
    }
    if values.iter().all(Option::is_none) {
        let r = b.rng.gen_range(0..rows);
        values[r] = Some(lex.value_words(keys[r], 0, 1));
    }
    for (r, &k) in keys.iter().enumerate() {
        let y0 = FORM_TOP + r as f64 * FORM_ROW_PITCH;
        b.block(&[(&lex.keys[k], FORM_KEY_X.0, y0, FORM_KEY_X.1, y0 + FORM_ROW_HEIGHT)]);
    }
    for (r, words) in values.iter().enumerate() {
        let Some(words) = words else { continue };
        let y0 = FORM_TOP + r as f64 * FORM_ROW_PITCH;
        let placed: Vec<(&str, f64, f64, f64, f64)> = words
            .iter()
            .enumerate()
            .map(|(j, w)| {
                let x0 = FORM_VALUE_X + j as f64 * FORM_VALUE_PITCH;
                (*w, x0, y0, x0 + FORM_VALUE_WIDTH, y0 + FORM_ROW_HEIGHT)
            })
            .collect();
        b.block(&placed);
    }
    ann.kie = keys
        .iter()
        .zip(&values)
        .filter_map(|(&k, v)| {
            v.as_ref().map(|v| KeyValue {
                key: lex.keys[k].clone(),
                value: v.join(" "),
            })
        })
        .collect();
}

fn table<R: Rng>(lex: &Lexicon, b: &mut Builder<'_, R>, ann: &mut Annotations) {
    let n_cols = b.rng.gen_range(2..=4.min(lex.columns.len()));
    let n_rows = b.rng.gen_range(3.min(lex.row_labels.len())..=6.min(lex.row_labels.len()));
    let cols = sample(b.rng, lex.columns.len(), n_cols).into_vec();
    let rows = sample(b.rng, lex.row_labels.len(), n_rows).into_vec();
    let cells: Vec<Vec<usize>> = (0..n_rows)
        .map(|_| cols.iter().map(|&c| b.rng.gen_range(0..lex.cells[c].len())).collect())
        .collect();
    let (top, pitch, h) = (140.0, 90.0, 50.0);
    let col_x = |j: usize| 300.0 + j as f64 * 160.0;
    for (j, &c) in cols.iter().enumerate() {
        b.block(&[(&lex.columns[c], col_x(j), top, col_x(j) + 120.0, top + h)]);
    }
    for (i, &r) in rows.iter().enumerate() {
        let y0 = top + (i + 1) as f64 * pitch;
        b.block(&[(&lex.row_labels[r], 80.0, y0, 220.0, y0 + h)]);
        for (j, &c) in cols.iter().enumerate() {
            let word = &lex.cells[c][cells[i][j]];
            b.block(&[(word, col_x(j), y0, col_x(j) + 120.0, y0 + h)]);
        }
    }
    for _ in 0..2 {
        let i = b.rng.gen_range(0..n_rows);
        let j = b.rng.gen_range(0..n_cols);
        let (r, c) = (rows[i], cols[j]);
        ann.vqa.push(QaPair {
            question: format!("What is the {} of {}?", lex.columns[c], lex.row_labels[r]),
            answers: vec![lex.cells[c][cells[i][j]].clone()],
        });
        let entailed = b.rng.gen_bool(0.5);
        let shown = if entailed {
            cells[i][j]
        } else {
            let pool = lex.cells[c].len();
            (cells[i][j] + b.rng.gen_range(1..pool)) % pool
        };
        ann.nli.push(Statement {
            statement: format!("{} {} {}", lex.row_labels[r], lex.columns[c], lex.cells[c][shown]),
            entailed,
        });
    }
}

fn letter<R: Rng>(lex: &Lexicon, b: &mut Builder<'_, R>) {
    let n = lex.letter_words.len();
    let paragraphs = b.rng.gen_range(2..=4);
    let mut y = 140.0;
    let mut prev = b.rng.gen_range(0..n);
    for _ in 0..paragraphs {
        let lines = b.rng.gen_range(2..=3);
        let mut words: Vec<(usize, f64, f64)> = Vec::new();
        for _ in 0..lines {
            let count = b.rng.gen_range(4..=7);
            for j in 0..count {
                prev = (prev * 7 + 3 + b.rng.gen_range(0..3)) % n;
                words.push((prev, 100.0 + j as f64 * 110.0, y));
            }
            y += 60.0;
        }
        let placed: Vec<(&str, f64, f64, f64, f64)> = words
            .iter()
            .map(|&(w, x, y)| (lex.letter_words[w].as_str(), x, y, x + 95.0, y + 40.0))
            .collect();
        b.block(&placed);
        y += 50.0;
    }
    let sig = b.rng.gen_range(0..n);
    let y = y.clamp(PAGE_HEIGHT - 200.0, PAGE_HEIGHT - 60.0);
    b.block(&[(lex.letter_words[sig].as_str(), 700.0, y, 800.0, y + 40.0)]);
}
