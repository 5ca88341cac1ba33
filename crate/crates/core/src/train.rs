//! Optimisation: AdamW with warmup and cosine decay, pre-training on
//! next-token or infilling examples, instruction tuning, greedy decoding and
//! next-token accuracy.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::infill::{
    build_infill_sequence, derive_seed, pack_chunks, sample_blocks, BlockDocument, Chunk,
    InfillError, InfillExample, Packable, Segment, SpecialVocab, Span, DEFAULT_MASK_RATE,
};
use crate::model::{argmax, forward, Model, ModelError, ModelInput};
use crate::spatial::BBox;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    EmptyDataset,
    NonFinite { step: usize, loss: f64 },
    Model(ModelError),
    Infill(InfillError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            Self::EmptyDataset => write!(f, "dataset is empty"),
            Self::NonFinite { step, loss } => {
                write!(f, "non-finite loss {loss} at step {step}")
            }
            Self::Model(e) => write!(f, "{e}"),
            Self::Infill(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<InfillError> for TrainError {
    fn from(e: InfillError) -> Self {
        Self::Infill(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// Pre-training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Left-to-right next-token prediction over whole documents.
    Autoregressive,
    /// Block infilling over masked blocks.
    Infill,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Autoregressive => "autoregressive",
            Objective::Infill => "infill",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ar" | "autoregressive" | "causal" => Ok(Objective::Autoregressive),
            "infill" => Ok(Objective::Infill),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

/// The three objective settings compared in the objective ablation: a loss
/// together with the λ gates it is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectivePreset {
    Causal,
    CausalSpatial,
    InfillSpatial,
}

impl ObjectivePreset {
    pub const ALL: [ObjectivePreset; 3] = [
        ObjectivePreset::Causal,
        ObjectivePreset::CausalSpatial,
        ObjectivePreset::InfillSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectivePreset::Causal => "causal",
            ObjectivePreset::CausalSpatial => "causal+spatial",
            ObjectivePreset::InfillSpatial => "infill+spatial",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            ObjectivePreset::Causal | ObjectivePreset::CausalSpatial => Objective::Autoregressive,
            ObjectivePreset::InfillSpatial => Objective::Infill,
        }
    }

    /// `(λts, λst, λss)`.
    pub fn gates(self) -> (f64, f64, f64) {
        match self {
            ObjectivePreset::Causal => (0.0, 0.0, 0.0),
            _ => (0.0, 0.0, 1.0),
        }
    }
}

impl std::str::FromStr for ObjectivePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectivePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown objective preset `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to `min_lr_ratio · lr`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Chunks per optimiser step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: Objective,
    pub mask_rate: f64,
    /// Packed chunk length.
    pub chunk_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 1000,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 1,
            epochs: 1,
            seed: 0,
            objective: Objective::Infill,
            mask_rate: DEFAULT_MASK_RATE,
            chunk_len: 512,
        }
    }

    pub fn instruct() -> Self {
        Self {
            lr: 1e-4,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr = {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("min_lr_ratio = {}", self.min_lr_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas = ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if self.batch_size == 0 || self.chunk_len == 0 {
            return bad("batch_size and chunk_len must be positive".into());
        }
        if !(0.0..=crate::infill::MAX_MASK_RATE).contains(&self.mask_rate) {
            return bad(format!("mask_rate = {}", self.mask_rate));
        }
        Ok(())
    }

    /// Learning rate at optimiser step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                if step < self.warmup_steps {
                    return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
                }
                let span = total.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + (self.lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// AdamW with decoupled weight decay. Decay applies to matrices only; gains,
/// biases and other vectors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: Vec<u64>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: vec![0; shapes.len()],
            m: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            v: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
        }
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// (for example spatial tables when all gates are zero) are untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = if p.shape().len() >= 2 {
                lr * self.weight_decay
            } else {
                0.0
            };
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let step = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let eps = self.eps as f32;
            let shrink = (1.0 - decay) as f32;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w = *w * shrink - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Model input with per-position targets and loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedChunk {
    pub input: ModelInput,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SupervisedChunk {
    /// Uses the chunk's own targets (infill segments, responses, or
    /// next tokens, depending on how it was built).
    pub fn from_chunk(chunk: &Chunk, bins: usize) -> Self {
        Self {
            input: ModelInput::from_chunk(chunk, bins),
            targets: chunk.targets.iter().map(|&t| t as usize).collect(),
            mask: chunk.loss_mask.clone(),
        }
    }

    /// Next-token targets within each span; the last position of a span is
    /// unsupervised.
    pub fn next_token(chunk: &Chunk, bins: usize) -> Self {
        let n = chunk.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for s in &chunk.spans {
            for i in s.start..s.start + s.len.saturating_sub(1) {
                targets[i] = chunk.ids[i + 1] as usize;
                mask[i] = true;
            }
        }
        Self {
            input: ModelInput::from_chunk(chunk, bins),
            targets,
            mask,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, total_steps: usize) -> Result<Self, TrainError> {
        config.validate()?;
        model.config.validate()?;
        let named = model.weights.named();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        let opt = AdamW::new(&shapes, &config);
        Ok(Self {
            model,
            config,
            opt,
            step: 0,
            total_steps: total_steps.max(1),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step, self.total_steps)
    }

    /// Mean loss over `batch` (each chunk averaged over its supervised
    /// positions), followed by one optimiser update.
    pub fn step(&mut self, batch: &[SupervisedChunk]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let n_params = self.model.weights.named().len();
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n_params];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f32;
        for sc in batch {
            let mut g = Graph::new();
            let vars = self.model.weights.register(&mut g, true);
            let logits = forward(&mut g, &vars, &self.model.config, &sc.input)?;
            let loss = g.cross_entropy(logits, &sc.targets, &sc.mask)?;
            let value = f64::from(g.value(loss).item());
            if !value.is_finite() {
                log::error!(
                    "non-finite loss {value} at step {}; {} fully masked attention rows",
                    self.step,
                    g.masked_row_warnings()
                );
                return Err(TrainError::NonFinite {
                    step: self.step,
                    loss: value,
                });
            }
            total += value;
            g.backward(loss)?;
            for (slot, v) in grads.iter_mut().zip(vars.all()) {
                if let Some(gr) = g.take_grad(v) {
                    match slot {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                                *a += b * scale;
                            }
                        }
                        None => {
                            let mut gr = gr;
                            gr.data_mut().iter_mut().for_each(|x| *x *= scale);
                            *slot = Some(gr);
                        }
                    }
                }
            }
        }
        if self.config.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    loss: norm,
                });
            }
            if norm > self.config.grad_clip {
                let c = (self.config.grad_clip / norm) as f32;
                for t in grads.iter_mut().flatten() {
                    t.data_mut().iter_mut().for_each(|x| *x *= c);
                }
            }
        }
        let lr = self.current_lr();
        let mut named = self.model.weights.named_mut();
        let mut params: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        self.opt.step(&mut params, &grads, lr);
        self.step += 1;
        Ok(total / batch.len() as f64)
    }

    /// Next-token step over every non-final position of each span.
    pub fn ar_step(&mut self, chunk: &Chunk) -> Result<f64, TrainError> {
        let sc = SupervisedChunk::next_token(chunk, self.model.config.spatial_bins);
        self.step(&[sc])
    }

    /// Infilling step: supervision only on masked-block tokens and `[E]`.
    pub fn infill_step(&mut self, chunk: &Chunk) -> Result<f64, TrainError> {
        let sc = SupervisedChunk::from_chunk(chunk, self.model.config.spatial_bins);
        self.step(&[sc])
    }
}

/// Builds one pre-training example for `doc` under `objective`.
pub fn make_example(
    doc: &BlockDocument,
    objective: Objective,
    mask_rate: f64,
    specials: &SpecialVocab,
    seed: u64,
) -> Result<InfillExample, InfillError> {
    match objective {
        Objective::Autoregressive => Ok(InfillExample::autoregressive(doc, specials)),
        Objective::Infill => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &doc.doc_id));
            let sampled = sample_blocks(doc, mask_rate, &mut rng)?;
            build_infill_sequence(doc, &sampled, specials, &mut rng)
        }
    }
}

/// Examples for every document that fits `max_len` after block-boundary
/// truncation.
pub fn make_examples(
    docs: &[BlockDocument],
    objective: Objective,
    mask_rate: f64,
    max_len: usize,
    specials: &SpecialVocab,
    seed: u64,
) -> Result<Vec<InfillExample>, InfillError> {
    let rate = match objective {
        Objective::Autoregressive => 0.0,
        Objective::Infill => mask_rate,
    };
    let mut out = Vec::with_capacity(docs.len());
    let mut skipped = 0;
    for doc in docs {
        match doc.fit_for_infill(max_len, rate) {
            Some(d) => out.push(make_example(&d, objective, mask_rate, specials, seed)?),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} document(s) whose first block exceeds {max_len} tokens");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

/// Trains `model` on `docs`. Every epoch draws fresh block masks (seeded by
/// epoch and document id), packs the examples and visits chunks in a
/// seeded random order.
pub fn pretrain(
    model: Model<f32>,
    docs: &[BlockDocument],
    specials: &SpecialVocab,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<(Model<f32>, TrainReport), TrainError> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let chunk_len = cfg.chunk_len.min(model.config.max_context);
    let epoch_chunks = |epoch: usize| -> Result<Vec<Chunk>, TrainError> {
        let seed = cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9);
        let examples = make_examples(docs, cfg.objective, cfg.mask_rate, chunk_len, specials, seed)?;
        let mut chunks = pack_chunks(&examples, chunk_len).chunks;
        chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        Ok(chunks)
    };
    let first = epoch_chunks(0)?;
    if first.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let steps_per_epoch = first.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(model, *cfg, steps_per_epoch * cfg.epochs)?;
    let bins = trainer.model.config.spatial_bins;
    let mut log = Vec::new();
    let mut pending = Some(first);
    for epoch in 0..cfg.epochs {
        let chunks = match pending.take() {
            Some(c) => c,
            None => epoch_chunks(epoch)?,
        };
        for batch in chunks.chunks(cfg.batch_size) {
            let sc: Vec<SupervisedChunk> = batch
                .iter()
                .map(|c| SupervisedChunk::from_chunk(c, bins))
                .collect();
            let lr = trainer.current_lr();
            let loss = trainer.step(&sc)?;
            let rec = LogRecord {
                step: trainer.steps_taken(),
                loss,
                lr,
                split: "train".into(),
            };
            on_log(&rec);
            log.push(rec);
        }
    }
    let steps = trainer.steps_taken();
    Ok((trainer.model, TrainReport { log, steps }))
}

/// Counts from [`ntp_accuracy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NtpReport {
    pub correct: usize,
    pub total: usize,
    /// Restricted to positions inside infill segments.
    pub infill_correct: usize,
    pub infill_total: usize,
}

impl NtpReport {
    /// Fraction over all supervised positions; the headline number.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }

    pub fn infill_accuracy(&self) -> Option<f64> {
        (self.infill_total > 0).then(|| self.infill_correct as f64 / self.infill_total as f64)
    }

    pub fn merge(self, other: NtpReport) -> NtpReport {
        NtpReport {
            correct: self.correct + other.correct,
            total: self.total + other.total,
            infill_correct: self.infill_correct + other.infill_correct,
            infill_total: self.infill_total + other.infill_total,
        }
    }
}

/// Teacher-forced argmax accuracy on each example's supervised positions.
pub fn ntp_accuracy(model: &Model<f32>, examples: &[InfillExample]) -> Result<NtpReport, TrainError> {
    let mut report = NtpReport {
        correct: 0,
        total: 0,
        infill_correct: 0,
        infill_total: 0,
    };
    let bins = model.config.spatial_bins;
    for ex in examples {
        if ex.supervised() == 0 {
            continue;
        }
        let mut input = ModelInput::sequence(&ex.input_ids, &ex.input_boxes, ex.prefix_len(), bins);
        input.positions = ex.position_ids.clone();
        let logits = model.logits(&input)?;
        for i in 0..ex.len() {
            if !ex.loss_mask[i] {
                continue;
            }
            let hit = argmax(logits.row(i)) == ex.targets[i] as usize;
            report.total += 1;
            report.correct += usize::from(hit);
            if matches!(ex.segments[i], Segment::Infill(_)) {
                report.infill_total += 1;
                report.infill_correct += usize::from(hit);
            }
        }
    }
    if report.total == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(report)
}

/// Greedy continuation of a prompt. Generated tokens carry an empty box.
/// Stops after `max_new` tokens or on any token in `stop` (which is not
/// returned). In prefix mode the prompt is the bidirectional prefix.
pub fn generate(
    model: &Model<f32>,
    prompt: &[u32],
    prompt_boxes: &[BBox],
    max_new: usize,
    stop: &[u32],
) -> Result<Vec<u32>, TrainError> {
    if prompt.len() != prompt_boxes.len() {
        return Err(ModelError::BadInput(format!(
            "{} prompt tokens but {} boxes",
            prompt.len(),
            prompt_boxes.len()
        ))
        .into());
    }
    let mut ids = prompt.to_vec();
    let mut boxes = prompt_boxes.to_vec();
    let mut out = Vec::new();
    let bins = model.config.spatial_bins;
    let prefix = match model.config.attention.decoder_mode {
        crate::attention::DecoderMode::Causal => 0,
        crate::attention::DecoderMode::Prefix => prompt.len(),
    };
    for _ in 0..max_new {
        if ids.len() >= model.config.max_context {
            break;
        }
        let input = ModelInput::sequence(&ids, &boxes, prefix, bins);
        let logits = model.logits(&input)?;
        let next = argmax(logits.row(ids.len() - 1)) as u32;
        if stop.contains(&next) {
            break;
        }
        out.push(next);
        ids.push(next);
        boxes.push(BBox::ZERO);
    }
    Ok(out)
}

/// A fully laid-out supervised sequence (prompt, separator, response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub ids: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub prefix_len: usize,
}

impl TrainSequence {
    /// `prompt [SEP] response [EOS]` with loss on the positions that predict
    /// the response and `[EOS]`. The prompt is cut from the front when the
    /// whole sequence would exceed `max_len`; the response is never cut.
    pub fn prompt_response(
        prompt: &[u32],
        prompt_boxes: &[BBox],
        response: &[u32],
        specials: &SpecialVocab,
        max_len: usize,
    ) -> Result<Self, TrainError> {
        let fixed = response.len() + 1;
        if fixed > max_len {
            return Err(TrainError::InvalidConfig(format!(
                "response of {} tokens does not fit in {max_len}",
                response.len()
            )));
        }
        let keep = prompt.len().min(max_len - fixed);
        let cut = prompt.len() - keep;
        let mut ids = prompt[cut..].to_vec();
        let mut boxes = prompt_boxes[cut..].to_vec();
        ids.push(specials.sep);
        boxes.push(BBox::ZERO);
        let prefix_len = ids.len();
        ids.extend_from_slice(response);
        boxes.extend(std::iter::repeat_n(BBox::ZERO, response.len()));
        let n = ids.len();
        let mut targets = vec![specials.pad; n];
        let mut loss_mask = vec![false; n];
        for i in prefix_len - 1..n {
            targets[i] = if i + 1 < n { ids[i + 1] } else { specials.eos };
            loss_mask[i] = true;
        }
        Ok(Self {
            ids,
            boxes,
            targets,
            loss_mask,
            prefix_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Packable for TrainSequence {
    fn packed_len(&self) -> usize {
        self.len()
    }

    fn append_to(&self, chunk: &mut Chunk) {
        chunk.spans.push(Span {
            start: chunk.ids.len(),
            len: self.len(),
            prefix_len: self.prefix_len,
        });
        chunk.ids.extend_from_slice(&self.ids);
        chunk.boxes.extend_from_slice(&self.boxes);
        chunk.positions.extend(0..self.len());
        chunk.targets.extend_from_slice(&self.targets);
        chunk.loss_mask.extend_from_slice(&self.loss_mask);
    }
}

/// Fine-tunes on prompt/response sequences; prompt tokens get no loss.
pub fn instruct_tune(
    model: Model<f32>,
    data: &[TrainSequence],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<(Model<f32>, TrainReport), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let chunk_len = cfg.chunk_len.min(model.config.max_context);
    let packing = pack_chunks(data, chunk_len);
    if packing.chunks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut chunks = packing.chunks;
    let steps_per_epoch = chunks.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(model, *cfg, steps_per_epoch * cfg.epochs)?;
    let bins = trainer.model.config.spatial_bins;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        chunks.shuffle(&mut rng);
        for batch in chunks.chunks(cfg.batch_size) {
            let sc: Vec<SupervisedChunk> = batch
                .iter()
                .map(|c| SupervisedChunk::from_chunk(c, bins))
                .collect();
            let lr = trainer.current_lr();
            let loss = trainer.step(&sc)?;
            let rec = LogRecord {
                step: trainer.steps_taken(),
                loss,
                lr,
                split: "instruct".into(),
            };
            on_log(&rec);
            log.push(rec);
        }
    }
    let steps = trainer.steps_taken();
    Ok((trainer.model, TrainReport { log, steps }))
}
