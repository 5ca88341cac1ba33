//! Instruction prompts for VQA, NLI, KIE and CLS rendered from annotated
//! documents.
//!
//! The `{document}` slot is the document's OCR token stream; its boxes ride
//! alongside the tokens, and the instruction text that follows carries empty
//! boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotations, Corpus, CorpusError, OcrDocument, Vocab};
use crate::infill::{derive_seed, SpecialVocab};
use crate::model::Model;
use crate::spatial::BBox;
use crate::train::{generate, TrainError, TrainSequence};

/// Words used by the templates. Vocabularies built for instruction data
/// must contain all of them.
pub const TEMPLATE_WORDS: [&str; 23] = [
    "What", "is", "the", "value", "for", "in", "document", "type", "of", "this", "Possible",
    "choices", "Yes", "or", "No", "None", "\"", "?", ":", "[", "]", ",", ".",
];

/// Choices listed by MCQ prompts, gold included.
pub const DEFAULT_MCQ_CHOICES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Vqa,
    Nli,
    Kie,
    Cls,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Vqa, Task::Nli, Task::Kie, Task::Cls];

    pub fn name(self) -> &'static str {
        match self {
            Task::Vqa => "VQA",
            Task::Nli => "NLI",
            Task::Kie => "KIE",
            Task::Cls => "CLS",
        }
    }

    /// Templates available for this task in `split`.
    pub fn templates(self, split: Split) -> &'static [Template] {
        use Template::*;
        match (self, split) {
            (Task::Vqa, _) => &[Extraction],
            (Task::Nli, _) => &[Mcq],
            (Task::Kie, Split::Train) => &[Extraction, Mcq, InternalClassification],
            (Task::Kie, Split::Test) => &[Extraction],
            (Task::Cls, Split::Train) => &[Mcq, InternalClassification],
            (Task::Cls, Split::Test) => &[Mcq],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Extraction,
    Mcq,
    InternalClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstructError {
    /// The template does not exist for the task, or not in this split.
    Template { task: Task, template: Template, split: Split },
    /// An annotation names a key or class outside the universe.
    Universe(String),
    Corpus(CorpusError),
}

impl fmt::Display for InstructError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Template {
                task,
                template,
                split,
            } => write!(f, "template {template:?} is not used for {task} in the {split} split"),
            Self::Universe(msg) => write!(f, "label universe: {msg}"),
            Self::Corpus(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for InstructError {}

impl From<CorpusError> for InstructError {
    fn from(e: CorpusError) -> Self {
        Self::Corpus(e)
    }
}

/// All keys and classes of a dataset; MCQ choices are drawn from here.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Universe {
    pub keys: BTreeSet<String>,
    pub classes: BTreeSet<String>,
}

impl Universe {
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a OcrDocument>) -> Self {
        let mut u = Universe::default();
        for d in docs {
            if let Some(a) = &d.annotations {
                u.keys.extend(a.kie.iter().map(|kv| kv.key.clone()));
                u.classes.extend(a.class_label.iter().cloned());
            }
        }
        u
    }
}

/// A document ready for rendering: its token stream, text and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDoc {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub text: String,
    pub annotations: Annotations,
}

impl AnnotatedDoc {
    pub fn from_ocr(doc: &OcrDocument, vocab: &Vocab) -> Result<Self, CorpusError> {
        let norm = doc.normalize()?;
        let bd = norm.to_block_document(vocab)?;
        Ok(Self {
            doc_id: doc.doc_id.clone(),
            text: norm.text(),
            tokens: bd.tokens,
            boxes: bd.boxes,
            annotations: norm.annotations,
        })
    }

    fn check_universe(&self, u: &Universe) -> Result<(), InstructError> {
        for kv in &self.annotations.kie {
            if !u.keys.contains(&kv.key) {
                return Err(InstructError::Universe(format!(
                    "{}: key `{}` not in the key universe",
                    self.doc_id, kv.key
                )));
            }
        }
        if let Some(c) = &self.annotations.class_label {
            if !u.classes.contains(c) {
                return Err(InstructError::Universe(format!(
                    "{}: class `{c}` not in the class universe",
                    self.doc_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub task: Task,
    pub template: Template,
    pub doc_id: String,
    pub split: Split,
    /// The text after `{document}`.
    pub instruction: String,
    pub response: String,
    /// MCQ choices in prompt order; empty for other templates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    /// KIE extraction: the key asked about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl PromptRecord {
    /// The full prompt with the document text in the `{document}` slot.
    pub fn prompt(&self, document: &str) -> String {
        format!("{document} {}", self.instruction)
    }
}

fn quote(s: &str) -> String {
    format!("\"{s}\"")
}

fn choice_list(choices: &[String]) -> String {
    format!("[{}]", choices.join(", "))
}

pub fn vqa_instruction(question: &str) -> String {
    question.to_string()
}

pub fn nli_instruction(statement: &str) -> String {
    format!("{}, Yes or No?", quote(statement))
}

pub fn kie_extraction_instruction(key: &str) -> String {
    format!("What is the value for the {}?", quote(key))
}

pub fn kie_mcq_instruction(value: &str, choices: &[String]) -> String {
    format!(
        "What is {} in the document? Possible choices: {}.",
        quote(value),
        choice_list(choices)
    )
}

pub fn kie_internal_instruction(value: &str) -> String {
    format!("What is {} in the document?", quote(value))
}

pub fn cls_mcq_instruction(choices: &[String]) -> String {
    format!("What type of document is this? Possible choices: {}.", choice_list(choices))
}

pub fn cls_internal_instruction() -> String {
    "What type of document is this?".to_string()
}

/// `k` choices from `universe` including `gold`, in uniformly random order.
/// Fewer when the universe is smaller than `k`.
pub fn sample_choices<R: Rng>(gold: &str, universe: &BTreeSet<String>, k: usize, rng: &mut R) -> Vec<String> {
    let others: Vec<&String> = universe.iter().filter(|c| c.as_str() != gold).collect();
    let take = k.saturating_sub(1).min(others.len());
    let mut out: Vec<String> = sample(rng, others.len(), take)
        .into_iter()
        .map(|i| others[i].clone())
        .collect();
    out.push(gold.to_string());
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub mcq_choices: usize,
    /// Extraction prompts per document over keys the document lacks.
    pub absent_keys: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mcq_choices: DEFAULT_MCQ_CHOICES,
            absent_keys: 1,
        }
    }
}

/// Renders one task/template pair over every matching annotation of `doc`.
pub fn render<R: Rng>(
    doc: &AnnotatedDoc,
    task: Task,
    template: Template,
    split: Split,
    universe: &Universe,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<PromptRecord>, InstructError> {
    if !task.templates(split).contains(&template) {
        return Err(InstructError::Template {
            task,
            template,
            split,
        });
    }
    doc.check_universe(universe)?;
    let ann = &doc.annotations;
    let rec = |instruction: String, response: String, choices: Vec<String>| PromptRecord {
        task,
        template,
        doc_id: doc.doc_id.clone(),
        split,
        instruction,
        response,
        choices,
        key: None,
    };
    let mut out = Vec::new();
    match (task, template) {
        (Task::Vqa, _) => {
            for qa in &ann.vqa {
                if let Some(answer) = qa.answers.first() {
                    out.push(rec(vqa_instruction(&qa.question), answer.clone(), vec![]));
                }
            }
        }
        (Task::Nli, _) => {
            for s in &ann.nli {
                let answer = if s.entailed { "Yes" } else { "No" };
                out.push(rec(nli_instruction(&s.statement), answer.into(), vec![]));
            }
        }
        (Task::Kie, Template::Extraction) => {
            for kv in &ann.kie {
                out.push(PromptRecord {
                    key: Some(kv.key.clone()),
                    ..rec(kie_extraction_instruction(&kv.key), kv.value.clone(), vec![])
                });
            }
            if !ann.kie.is_empty() {
                let present: BTreeSet<&str> = ann.kie.iter().map(|kv| kv.key.as_str()).collect();
                let absent: Vec<&String> = universe.keys.iter().filter(|k| !present.contains(k.as_str())).collect();
                let n = cfg.absent_keys.min(absent.len());
                for i in sample(rng, absent.len(), n) {
                    out.push(PromptRecord {
                        key: Some(absent[i].clone()),
                        ..rec(kie_extraction_instruction(absent[i]), "None".into(), vec![])
                    });
                }
            }
        }
        (Task::Kie, Template::Mcq) => {
            for kv in &ann.kie {
                let choices = sample_choices(&kv.key, &universe.keys, cfg.mcq_choices, rng);
                out.push(rec(kie_mcq_instruction(&kv.value, &choices), kv.key.clone(), choices));
            }
        }
        (Task::Kie, Template::InternalClassification) => {
            for kv in &ann.kie {
                out.push(rec(kie_internal_instruction(&kv.value), kv.key.clone(), vec![]));
            }
        }
        (Task::Cls, Template::Mcq) => {
            if let Some(c) = &ann.class_label {
                let choices = sample_choices(c, &universe.classes, cfg.mcq_choices, rng);
                out.push(rec(cls_mcq_instruction(&choices), c.clone(), choices));
            }
        }
        (Task::Cls, _) => {
            if let Some(c) = &ann.class_label {
                out.push(rec(cls_internal_instruction(), c.clone(), vec![]));
            }
        }
    }
    Ok(out)
}

/// Every template the split allows, for every task.
pub fn render_all<R: Rng>(
    doc: &AnnotatedDoc,
    split: Split,
    universe: &Universe,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<PromptRecord>, InstructError> {
    let mut out = Vec::new();
    for task in Task::ALL {
        for &template in task.templates(split) {
            out.extend(render(doc, task, template, split, universe, cfg, rng)?);
        }
    }
    Ok(out)
}

/// Train-split prompts listing k choices become k copies; copy `i` lists the
/// choices rotated to start at choice `i`. Test records pass through.
pub fn flatten_mcq(records: Vec<PromptRecord>) -> Vec<PromptRecord> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.split != Split::Train || r.choices.len() < 2 {
            out.push(r);
            continue;
        }
        for i in 0..r.choices.len() {
            let mut choices = r.choices.clone();
            choices.rotate_left(i);
            let instruction = match r.task {
                Task::Cls => cls_mcq_instruction(&choices),
                _ => {
                    // The value sits between the first pair of quotes.
                    let value = r.instruction.split('"').nth(1).unwrap_or_default();
                    kie_mcq_instruction(value, &choices)
                }
            };
            out.push(PromptRecord {
                instruction,
                choices,
                ..r.clone()
            });
        }
    }
    out
}

/// Record counts per task and split, zeros included.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct DatasetStats {
    pub counts: BTreeMap<Task, BTreeMap<Split, usize>>,
}

pub fn dataset_stats(records: &[PromptRecord]) -> DatasetStats {
    let mut counts: BTreeMap<Task, BTreeMap<Split, usize>> = Task::ALL
        .iter()
        .map(|&t| (t, [(Split::Train, 0), (Split::Test, 0)].into_iter().collect()))
        .collect();
    for r in records {
        *counts.entry(r.task).or_default().entry(r.split).or_default() += 1;
    }
    DatasetStats { counts }
}

impl DatasetStats {
    pub fn get(&self, task: Task, split: Split) -> usize {
        self.counts.get(&task).and_then(|m| m.get(&split)).copied().unwrap_or(0)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6}{:>10}{:>10}", "task", "train", "test")?;
        for (task, m) in &self.counts {
            writeln!(
                f,
                "{:<6}{:>10}{:>10}",
                task.name(),
                m.get(&Split::Train).unwrap_or(&0),
                m.get(&Split::Test).unwrap_or(&0)
            )?;
        }
        Ok(())
    }
}

/// Rendered and encoded prompts for both splits of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Flattened train records, then test records.
    pub records: Vec<PromptRecord>,
    pub encoded: Vec<EncodedPrompt>,
}

impl PromptSet {
    /// Training documents give the train split, held-out documents the
    /// test split. Each document renders with its own seeded generator.
    pub fn build(corpus: &Corpus, cfg: &RenderConfig, seed: u64) -> Result<Self, InstructError> {
        let universe = Universe::from_docs(corpus.train.iter().chain(&corpus.heldout));
        let mut records = Vec::new();
        let mut encoded = Vec::new();
        for (split, docs) in [(Split::Train, &corpus.train), (Split::Test, &corpus.heldout)] {
            for d in docs.iter() {
                let doc = AnnotatedDoc::from_ocr(d, &corpus.vocab)?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &doc.doc_id));
                let mut recs = render_all(&doc, split, &universe, cfg, &mut rng)?;
                if split == Split::Train {
                    recs = flatten_mcq(recs);
                }
                encoded.extend(recs.iter().map(|r| EncodedPrompt::new(r, &doc, &corpus.vocab)));
                records.extend(recs);
            }
        }
        Ok(Self { records, encoded })
    }
}

/// One line of the prompt stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedPrompt {
    pub task: Task,
    pub template: Template,
    pub prompt_tokens: Vec<u32>,
    pub prompt_bboxes: Vec<[f64; 4]>,
    pub response_tokens: Vec<u32>,
    pub split: Split,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl EncodedPrompt {
    pub fn new(record: &PromptRecord, doc: &AnnotatedDoc, vocab: &Vocab) -> Self {
        let mut prompt_tokens = doc.tokens.clone();
        let mut prompt_bboxes: Vec<[f64; 4]> = doc.boxes.iter().map(|b| b.to_array()).collect();
        let inst = vocab.encode(&record.instruction);
        prompt_bboxes.extend(std::iter::repeat_n(BBox::ZERO.to_array(), inst.len()));
        prompt_tokens.extend(inst);
        Self {
            task: record.task,
            template: record.template,
            prompt_tokens,
            prompt_bboxes,
            response_tokens: vocab.encode(&record.response),
            split: record.split,
            doc_id: record.doc_id.clone(),
            key: record.key.clone(),
        }
    }

    /// `prompt [SEP] response [EOS]` training layout.
    pub fn train_sequence(&self, specials: &SpecialVocab, max_len: usize) -> Result<TrainSequence, TrainError> {
        TrainSequence::prompt_response(&self.prompt_tokens, &self.boxes(), &self.response_tokens, specials, max_len)
    }

    /// Greedy response: the prompt (cut from the front to leave room for
    /// `max_new` tokens) and `[SEP]`, continued until `[EOS]`.
    pub fn predict(
        &self,
        model: &Model<f32>,
        specials: &SpecialVocab,
        max_len: usize,
        max_new: usize,
    ) -> Result<Vec<u32>, TrainError> {
        let room = max_len.min(model.config.max_context).saturating_sub(max_new + 1);
        let cut = self.prompt_tokens.len().saturating_sub(room);
        let mut ids = self.prompt_tokens[cut..].to_vec();
        let mut boxes = self.boxes()[cut..].to_vec();
        ids.push(specials.sep);
        boxes.push(BBox::ZERO);
        generate(model, &ids, &boxes, max_new, &[specials.eos, specials.end])
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.prompt_bboxes
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap_or(BBox::ZERO))
            .collect()
    }
}

pub fn write_jsonl<T: Serialize>(items: &[T], out: &mut impl Write) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut *out, it)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
