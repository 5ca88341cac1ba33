//! Block-infilling pre-training examples.
//!
//! A document partitioned into blocks `c_1 … c_K` is corrupted by replacing
//! `M` sampled blocks with a single `[M]` token each. The sampled blocks are
//! then appended in shuffled order, each introduced by `[S]`, and the model
//! learns to emit the block tokens followed by `[E]`:
//!
//! ```text
//! input : x1 [M] [M] x6 [S] x4 x5 [S] x2 x3
//! target:  .   .   .  .  x4 x5 [E] x2 x3 [E]
//! ```
//!
//! Tokens of an infill segment reuse the position id of their `[M]` slot, and
//! `[M]`/`[S]` carry the union box of the masked block. `[M]` is a single
//! token whatever the block length.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::spatial::BBox;
use crate::tensor::{Graph, Scalar, TensorError, Var};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const MAX_MASK_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum InfillError {
    /// Blocks overlap, leave gaps, or run past the document.
    BadPartition(String),
    LengthMismatch { tokens: usize, boxes: usize },
    MaskRate(f64),
    UnknownBlock(usize),
    DuplicateBlock(usize),
    Malformed(String),
    Tensor(TensorError),
}

impl fmt::Display for InfillError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadPartition(msg) => write!(f, "blocks do not partition the document: {msg}"),
            Self::LengthMismatch { tokens, boxes } => {
                write!(f, "{tokens} tokens but {boxes} boxes")
            }
            Self::MaskRate(r) => write!(f, "mask rate {r} outside [0, {MAX_MASK_RATE}]"),
            Self::UnknownBlock(b) => write!(f, "block {b} is not part of the document"),
            Self::DuplicateBlock(b) => write!(f, "block {b} sampled twice"),
            Self::Malformed(msg) => write!(f, "malformed infill example: {msg}"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for InfillError {}

impl From<TensorError> for InfillError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Ids of the control tokens. They sit directly above the text vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialVocab {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    /// `[M]`, stands in for a masked block.
    pub mask: u32,
    /// `[S]`, opens an infill segment.
    pub start: u32,
    /// `[E]`, closes an infill segment.
    pub end: u32,
    /// Prompt/response separator for instruction tuning.
    pub sep: u32,
    pub unk: u32,
}

impl SpecialVocab {
    pub const COUNT: u32 = 8;
    pub const NAMES: [&'static str; 8] = [
        "[PAD]", "[BOS]", "[EOS]", "[M]", "[S]", "[E]", "[SEP]", "[UNK]",
    ];

    /// Allocates the special ids right after `text_vocab` text tokens.
    pub fn after(text_vocab: u32) -> Self {
        Self {
            pad: text_vocab,
            bos: text_vocab + 1,
            eos: text_vocab + 2,
            mask: text_vocab + 3,
            start: text_vocab + 4,
            end: text_vocab + 5,
            sep: text_vocab + 6,
            unk: text_vocab + 7,
        }
    }

    pub fn ids(&self) -> [u32; 8] {
        [
            self.pad, self.bos, self.eos, self.mask, self.start, self.end, self.sep, self.unk,
        ]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids().contains(&id)
    }

    /// Total vocabulary size including these specials.
    pub fn vocab_size(&self) -> usize {
        self.pad as usize + Self::COUNT as usize
    }
}

/// Contiguous token span `[start, end)` sharing one layout region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    pub bbox: BBox,
}

impl Block {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Token sequence with per-token boxes and a block partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDocument {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub blocks: Vec<Block>,
}

impl BlockDocument {
    /// Builds a document from token spans. Block boxes are the union of
    /// their token boxes.
    pub fn new(
        doc_id: impl Into<String>,
        tokens: Vec<u32>,
        boxes: Vec<BBox>,
        spans: &[(usize, usize)],
    ) -> Result<Self, InfillError> {
        if tokens.len() != boxes.len() {
            return Err(InfillError::LengthMismatch {
                tokens: tokens.len(),
                boxes: boxes.len(),
            });
        }
        let blocks = spans
            .iter()
            .enumerate()
            .map(|(id, &(start, end))| {
                let bbox = if start < end && end <= boxes.len() {
                    BBox::union_all(&boxes[start..end]).expect("non-empty span")
                } else {
                    BBox::ZERO
                };
                Block {
                    id,
                    start,
                    end,
                    bbox,
                }
            })
            .collect();
        let doc = Self {
            doc_id: doc_id.into(),
            tokens,
            boxes,
            blocks,
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Checks that blocks are non-empty, contiguous, non-overlapping, and
    /// cover every token.
    pub fn validate(&self) -> Result<(), InfillError> {
        if self.tokens.len() != self.boxes.len() {
            return Err(InfillError::LengthMismatch {
                tokens: self.tokens.len(),
                boxes: self.boxes.len(),
            });
        }
        let mut cursor = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.id != i {
                return Err(InfillError::BadPartition(format!(
                    "block at index {i} has id {}",
                    b.id
                )));
            }
            if b.start != cursor {
                return Err(InfillError::BadPartition(format!(
                    "block {i} starts at {} but previous block ended at {cursor}",
                    b.start
                )));
            }
            if b.end <= b.start {
                return Err(InfillError::BadPartition(format!("block {i} is empty")));
            }
            cursor = b.end;
        }
        if cursor != self.tokens.len() {
            return Err(InfillError::BadPartition(format!(
                "blocks cover {cursor} of {} tokens",
                self.tokens.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps the longest prefix of whole blocks with at most `max_tokens`
    /// tokens. Returns `None` if not even the first block fits.
    pub fn truncate_blocks(&self, max_tokens: usize) -> Option<Self> {
        let keep = self
            .blocks
            .iter()
            .take_while(|b| b.end <= max_tokens)
            .count();
        if keep == 0 {
            return None;
        }
        let end = self.blocks[keep - 1].end;
        Some(Self {
            doc_id: self.doc_id.clone(),
            tokens: self.tokens[..end].to_vec(),
            boxes: self.boxes[..end].to_vec(),
            blocks: self.blocks[..keep].to_vec(),
        })
    }

    /// Truncates at a block boundary so the infill example built with
    /// `mask_rate` fits in `max_len` (an example is `len + 2·M` long).
    pub fn fit_for_infill(&self, max_len: usize, mask_rate: f64) -> Option<Self> {
        let mut doc = self.truncate_blocks(max_len)?;
        loop {
            let m = masked_count(doc.blocks.len(), mask_rate);
            if doc.len() + 2 * m <= max_len {
                return Some(doc);
            }
            let limit = doc.blocks[doc.blocks.len() - 1].start;
            doc = doc.truncate_blocks(limit)?;
        }
    }
}

/// `M = max(1, round(rate·K))` for a positive rate, else 0.
pub fn masked_count(k: usize, mask_rate: f64) -> usize {
    if mask_rate <= 0.0 || k == 0 {
        0
    } else {
        ((mask_rate * k as f64).round() as usize).clamp(1, k)
    }
}

/// Uniformly samples `M` distinct blocks without replacement. Returned block
/// indices are in document order.
pub fn sample_blocks<R: Rng>(
    doc: &BlockDocument,
    mask_rate: f64,
    rng: &mut R,
) -> Result<Vec<usize>, InfillError> {
    if !(0.0..=MAX_MASK_RATE).contains(&mask_rate) {
        return Err(InfillError::MaskRate(mask_rate));
    }
    let k = doc.blocks.len();
    let m = masked_count(k, mask_rate);
    let mut picked = rand::seq::index::sample(rng, k, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Which part of an infill example a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// The corrupted document `x̃`.
    Context,
    /// Infill segment `m` (0-based, in generation order).
    Infill(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillExample {
    pub doc_id: String,
    pub input_ids: Vec<u32>,
    pub input_boxes: Vec<BBox>,
    /// Token predicted at each position; `pad` where unsupervised.
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub position_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Length of `x̃`.
    pub context_len: usize,
    pub n_masked: usize,
}

impl InfillExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Bidirectional prefix for the prefix decoder: `x̃` when blocks were
    /// masked, nothing for a plain next-token example.
    pub fn prefix_len(&self) -> usize {
        if self.n_masked > 0 {
            self.context_len
        } else {
            0
        }
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Plain next-token example over the whole document.
    pub fn autoregressive(doc: &BlockDocument, specials: &SpecialVocab) -> Self {
        let n = doc.len();
        let mut targets = vec![specials.pad; n];
        let mut loss_mask = vec![false; n];
        for i in 0..n.saturating_sub(1) {
            targets[i] = doc.tokens[i + 1];
            loss_mask[i] = true;
        }
        Self {
            doc_id: doc.doc_id.clone(),
            input_ids: doc.tokens.clone(),
            input_boxes: doc.boxes.clone(),
            targets,
            loss_mask,
            position_ids: (0..n).collect(),
            segments: vec![Segment::Context; n],
            context_len: n,
            n_masked: 0,
        }
    }
}

/// Lays out `x̃` followed by the sampled blocks in shuffled order.
pub fn build_infill_sequence<R: Rng>(
    doc: &BlockDocument,
    sampled: &[usize],
    specials: &SpecialVocab,
    rng: &mut R,
) -> Result<InfillExample, InfillError> {
    if sampled.is_empty() {
        return Ok(InfillExample::autoregressive(doc, specials));
    }
    let mut is_masked = vec![false; doc.blocks.len()];
    for &b in sampled {
        if b >= doc.blocks.len() {
            return Err(InfillError::UnknownBlock(b));
        }
        if is_masked[b] {
            return Err(InfillError::DuplicateBlock(b));
        }
        is_masked[b] = true;
    }

    let mut ids = Vec::new();
    let mut boxes = Vec::new();
    // x̃ position of each masked block's [M].
    let mut slot = vec![usize::MAX; doc.blocks.len()];
    for block in &doc.blocks {
        if is_masked[block.id] {
            slot[block.id] = ids.len();
            ids.push(specials.mask);
            boxes.push(block.bbox);
        } else {
            ids.extend_from_slice(&doc.tokens[block.start..block.end]);
            boxes.extend_from_slice(&doc.boxes[block.start..block.end]);
        }
    }
    let context_len = ids.len();
    let mut targets = vec![specials.pad; context_len];
    let mut loss_mask = vec![false; context_len];
    let mut position_ids: Vec<usize> = (0..context_len).collect();
    let mut segments = vec![Segment::Context; context_len];

    let mut order: Vec<usize> = sampled.to_vec();
    order.shuffle(rng);
    for (m, &b) in order.iter().enumerate() {
        let block = &doc.blocks[b];
        let toks = &doc.tokens[block.start..block.end];
        ids.push(specials.start);
        boxes.push(block.bbox);
        ids.extend_from_slice(toks);
        boxes.extend_from_slice(&doc.boxes[block.start..block.end]);
        targets.extend_from_slice(toks);
        targets.push(specials.end);
        let n = toks.len() + 1;
        loss_mask.extend(std::iter::repeat_n(true, n));
        position_ids.extend(std::iter::repeat_n(slot[b], n));
        segments.extend(std::iter::repeat_n(Segment::Infill(m), n));
    }
    let example = InfillExample {
        doc_id: doc.doc_id.clone(),
        input_ids: ids,
        input_boxes: boxes,
        targets,
        loss_mask,
        position_ids,
        segments,
        context_len,
        n_masked: order.len(),
    };
    Ok(example)
}

/// Recovers the source token sequence by splicing each target segment,
/// minus its `[E]`, into the `[M]` slot named by its position id.
pub fn reconstruct(example: &InfillExample, specials: &SpecialVocab) -> Result<Vec<u32>, InfillError> {
    let n = example.len();
    if example.targets.len() != n
        || example.loss_mask.len() != n
        || example.position_ids.len() != n
        || example.segments.len() != n
        || example.input_boxes.len() != n
    {
        return Err(InfillError::Malformed("per-position arrays differ in length".into()));
    }
    if example.context_len > n {
        return Err(InfillError::Malformed("context longer than example".into()));
    }
    let context = &example.input_ids[..example.context_len];
    if example.n_masked == 0 {
        if example.context_len != n {
            return Err(InfillError::Malformed("unmasked example has infill tokens".into()));
        }
        return Ok(context.to_vec());
    }
    if example.segments[..example.context_len]
        .iter()
        .any(|s| *s != Segment::Context)
    {
        return Err(InfillError::Malformed("context position tagged as infill".into()));
    }
    let mask_count = context.iter().filter(|&&t| t == specials.mask).count();
    if mask_count != example.n_masked {
        return Err(InfillError::Malformed(format!(
            "{mask_count} [M] tokens for {} masked blocks",
            example.n_masked
        )));
    }

    let mut fills: Vec<Option<Vec<u32>>> = vec![None; example.context_len];
    let mut i = example.context_len;
    let mut expected_segment = 0;
    while i < n {
        let Segment::Infill(m) = example.segments[i] else {
            return Err(InfillError::Malformed(format!("position {i} is not in a segment")));
        };
        if m != expected_segment {
            return Err(InfillError::Malformed(format!(
                "segment {m} out of order at position {i}"
            )));
        }
        if example.input_ids[i] != specials.start {
            return Err(InfillError::Malformed(format!("segment {m} does not open with [S]")));
        }
        let slot = example.position_ids[i];
        if slot >= example.context_len || context[slot] != specials.mask {
            return Err(InfillError::Malformed(format!(
                "segment {m} points at position {slot}, which is not [M]"
            )));
        }
        let mut tokens = Vec::new();
        let mut closed = false;
        while i < n && example.segments[i] == Segment::Infill(m) {
            if !example.loss_mask[i] || example.position_ids[i] != slot {
                return Err(InfillError::Malformed(format!(
                    "segment {m} position {i} is unsupervised or moved"
                )));
            }
            let t = example.targets[i];
            if closed {
                return Err(InfillError::Malformed(format!("segment {m} continues after [E]")));
            }
            if t == specials.end {
                closed = true;
            } else {
                tokens.push(t);
            }
            i += 1;
        }
        if !closed || tokens.is_empty() {
            return Err(InfillError::Malformed(format!(
                "segment {m} does not end with exactly one [E] after its tokens"
            )));
        }
        if fills[slot].replace(tokens).is_some() {
            return Err(InfillError::Malformed(format!("slot {slot} filled twice")));
        }
        expected_segment += 1;
    }
    if expected_segment != example.n_masked {
        return Err(InfillError::Malformed(format!(
            "{expected_segment} segments for {} masked blocks",
            example.n_masked
        )));
    }

    let mut out = Vec::new();
    for (p, &t) in context.iter().enumerate() {
        match fills[p].take() {
            Some(tokens) => out.extend(tokens),
            None if t == specials.mask => {
                return Err(InfillError::Malformed(format!("[M] at {p} was never filled")))
            }
            None => out.push(t),
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the example's supervised positions. With no
/// masked blocks this is the plain next-token loss over the document.
pub fn infill_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    example: &InfillExample,
) -> Result<Var, InfillError> {
    let targets: Vec<usize> = example.targets.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(logits, &targets, &example.loss_mask)?)
}

/// One example's extent inside a packed chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub prefix_len: usize,
}

/// Examples concatenated back to back; attention is block-diagonal over
/// `spans`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub ids: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub spans: Vec<Span>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn empty() -> Self {
        Chunk {
            ids: Vec::new(),
            boxes: Vec::new(),
            positions: Vec::new(),
            targets: Vec::new(),
            loss_mask: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn from_examples<'a, E: Packable + 'a>(examples: impl IntoIterator<Item = &'a E>) -> Self {
        let mut chunk = Chunk::empty();
        for ex in examples {
            ex.append_to(&mut chunk);
        }
        chunk
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    pub chunks: Vec<Chunk>,
    /// Examples longer than `max_len`, left out.
    pub dropped: usize,
}

/// Anything that occupies one span of a packed chunk.
pub trait Packable {
    fn packed_len(&self) -> usize;
    fn append_to(&self, chunk: &mut Chunk);
}

impl Packable for InfillExample {
    fn packed_len(&self) -> usize {
        self.len()
    }

    fn append_to(&self, chunk: &mut Chunk) {
        chunk.spans.push(Span {
            start: chunk.ids.len(),
            len: self.len(),
            prefix_len: self.prefix_len(),
        });
        chunk.ids.extend_from_slice(&self.input_ids);
        chunk.boxes.extend_from_slice(&self.input_boxes);
        chunk.positions.extend_from_slice(&self.position_ids);
        chunk.targets.extend_from_slice(&self.targets);
        chunk.loss_mask.extend_from_slice(&self.loss_mask);
    }
}

/// Greedy first-fit packing: each example goes into the first chunk with
/// room, or opens a new one. Examples are never split.
pub fn pack_chunks<E: Packable>(examples: &[E], max_len: usize) -> Packing {
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut dropped = 0;
    for (i, ex) in examples.iter().enumerate() {
        let len = ex.packed_len();
        if len > max_len || len == 0 {
            dropped += 1;
            continue;
        }
        match bins.iter_mut().find(|(used, _)| used + len <= max_len) {
            Some((used, members)) => {
                *used += len;
                members.push(i);
            }
            None => bins.push((len, vec![i])),
        }
    }
    if dropped > 0 {
        log::info!("pack_chunks: dropped {dropped} example(s) longer than {max_len}");
    }
    Packing {
        chunks: bins
            .into_iter()
            .map(|(_, members)| Chunk::from_examples(members.iter().map(|&i| &examples[i])))
            .collect(),
        dropped,
    }
}

/// Stable 64-bit seed for one document: FNV-1a over the id, mixed with the
/// global seed through splitmix64.
pub fn derive_seed(global_seed: u64, doc_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in doc_id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ global_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
