//! Decoder-only transformer with a separate spatial stream.
//!
//! Token and learned position embeddings form the text stream `H`. The
//! spatial stream `S` is the summed per-coordinate box embedding; it is
//! computed once and fed unchanged to every layer. Blocks are pre-LN:
//!
//! ```text
//! H ← H + Attn(LN1(H), S)
//! H ← H + FF(LN2(H))
//! logits = LNf(H) · Eᵀ
//! ```

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_layer, build_block_mask, AttentionConfig, AttentionError, DecoderMode, LayerVars,
    LayerWeights,
};
use crate::infill::{Chunk, Span};
use crate::spatial::{BBox, SpatialEmbeddingTable, SpatialError, SpatialVars, DEFAULT_BINS};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    ContextTooLong { len: usize, max: usize },
    TokenOutOfRange { token: u32, vocab: usize },
    BadInput(String),
    Attention(AttentionError),
    Spatial(SpatialError),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            Self::ContextTooLong { len, max } => {
                write!(f, "sequence of {len} tokens exceeds max context {max}")
            }
            Self::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of {vocab}")
            }
            Self::BadInput(msg) => write!(f, "bad model input: {msg}"),
            Self::Attention(e) => write!(f, "{e}"),
            Self::Spatial(e) => write!(f, "{e}"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<AttentionError> for ModelError {
    fn from(e: AttentionError) -> Self {
        Self::Attention(e)
    }
}

impl From<SpatialError> for ModelError {
    fn from(e: SpatialError) -> Self {
        Self::Spatial(e)
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub spatial_bins: usize,
    pub tie_embeddings: bool,
    /// Std of the token, position and spatial embedding init.
    pub init_std: f64,
    /// Geometry (`d_model`, `n_heads`), λ gates and decoder mode.
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 520,
            n_layers: 4,
            d_ff: 256,
            max_context: 512,
            spatial_bins: DEFAULT_BINS,
            tie_embeddings: true,
            init_std: 0.02,
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn n_heads(&self) -> usize {
        self.attention.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.attention.validate()?;
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
            ("spatial_bins", self.spatial_bins),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.spatial_bins > u16::MAX as usize + 1 {
            return Err(ModelError::InvalidConfig("spatial_bins exceeds 65536".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(ModelError::InvalidConfig(format!("init_std = {}", self.init_std)));
        }
        Ok(())
    }

    /// Number of scalar parameters, counting tied embeddings once.
    pub fn num_params(&self) -> usize {
        let d = self.d_model();
        let layer = 5 * d * d + 4 * d + d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let head = if self.tie_embeddings {
            0
        } else {
            self.vocab_size * d
        };
        self.vocab_size * d
            + self.max_context * d
            + 4 * self.spatial_bins * d
            + self.n_layers * layer
            + 2 * d
            + head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub spatial: SpatialEmbeddingTable<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_gain: Tensor<F>,
    pub lnf_bias: Tensor<F>,
    /// Separate output head when embeddings are untied.
    pub lm_head: Option<Tensor<F>>,
}

impl<F: Scalar> ModelWeights<F> {
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model();
        let std = cfg.init_std;
        let tok_emb = Tensor::randn(&[cfg.vocab_size, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[cfg.max_context, d], std, &mut rng);
        let spatial = SpatialEmbeddingTable::random(cfg.spatial_bins, d, std, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::random(d, cfg.d_ff, cfg.n_layers, &mut rng))
            .collect();
        let lm_head = (!cfg.tie_embeddings)
            .then(|| Tensor::randn(&[cfg.vocab_size, d], std, &mut rng));
        Ok(Self {
            tok_emb,
            pos_emb,
            spatial,
            layers,
            lnf_gain: Tensor::full(&[d], F::one()),
            lnf_bias: Tensor::zeros(&[d]),
            lm_head,
        })
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (name, t) in ["left", "top", "right", "bottom"]
            .iter()
            .zip(self.spatial.tables())
        {
            out.push((format!("spatial.{name}"), t));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    /// Same order as [`ModelWeights::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (name, t) in ["left", "top", "right", "bottom"]
            .iter()
            .zip(self.spatial.tables_mut())
        {
            out.push((format!("spatial.{name}"), t));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        ModelWeights {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            spatial: SpatialEmbeddingTable {
                left: self.spatial.left.cast(),
                top: self.spatial.top.cast(),
                right: self.spatial.right.cast(),
                bottom: self.spatial.bottom.cast(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                        w_tq: l.w_tq.cast(),
                        w_tk: l.w_tk.cast(),
                        w_tv: l.w_tv.cast(),
                        w_sq: l.w_sq.cast(),
                        w_sk: l.w_sk.cast(),
                        ln1_gain: l.ln1_gain.cast(),
                        ln1_bias: l.ln1_bias.cast(),
                        ln2_gain: l.ln2_gain.cast(),
                        ln2_bias: l.ln2_bias.cast(),
                        ff_in: l.ff_in.cast(),
                        ff_in_bias: l.ff_in_bias.cast(),
                        ff_out: l.ff_out.cast(),
                        ff_out_bias: l.ff_out_bias.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            lm_head: self.lm_head.as_ref().map(Tensor::cast),
        }
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = ModelWeights::<F>::random(cfg, 0)?;
        let want = expected.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} weight arrays, config implies {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    h.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// Puts every weight on `g`, trainable or constant.
    pub fn register(&self, g: &mut Graph<F>, trainable: bool) -> ModelVars {
        ModelVars {
            tok_emb: g.leaf(self.tok_emb.clone(), trainable),
            pos_emb: g.leaf(self.pos_emb.clone(), trainable),
            spatial: SpatialVars::register(g, &self.spatial, trainable),
            layers: self.layers.iter().map(|l| l.register(g, trainable)).collect(),
            lnf_gain: g.leaf(self.lnf_gain.clone(), trainable),
            lnf_bias: g.leaf(self.lnf_bias.clone(), trainable),
            lm_head: self.lm_head.as_ref().map(|h| g.leaf(h.clone(), trainable)),
        }
    }
}

/// Graph handles for every weight, in [`ModelWeights::named`] order via
/// [`ModelVars::all`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub spatial: SpatialVars,
    pub layers: Vec<LayerVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub lm_head: Option<Var>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        out.extend(self.spatial.tables);
        for l in &self.layers {
            out.extend(l.all());
        }
        out.push(self.lnf_gain);
        out.push(self.lnf_bias);
        out.extend(self.lm_head);
        out
    }
}

/// Aligned per-position arrays plus the example spans of a packed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub ids: Vec<u32>,
    pub bins: Vec<[u16; 4]>,
    pub positions: Vec<usize>,
    pub spans: Vec<Span>,
}

impl ModelInput {
    /// One unpacked sequence with consecutive positions.
    pub fn sequence(ids: &[u32], boxes: &[BBox], prefix_len: usize, bins: usize) -> Self {
        Self {
            ids: ids.to_vec(),
            bins: boxes.iter().map(|b| b.bins(bins)).collect(),
            positions: (0..ids.len()).collect(),
            spans: vec![Span {
                start: 0,
                len: ids.len(),
                prefix_len,
            }],
        }
    }

    pub fn from_chunk(chunk: &Chunk, bins: usize) -> Self {
        Self {
            ids: chunk.ids.clone(),
            bins: chunk.boxes.iter().map(|b| b.bins(bins)).collect(),
            positions: chunk.positions.clone(),
            spans: chunk.spans.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let n = self.ids.len();
        if n == 0 {
            return Err(ModelError::BadInput("empty sequence".into()));
        }
        if n > cfg.max_context {
            return Err(ModelError::ContextTooLong {
                len: n,
                max: cfg.max_context,
            });
        }
        if self.bins.len() != n || self.positions.len() != n {
            return Err(ModelError::BadInput(format!(
                "{n} ids, {} boxes, {} positions",
                self.bins.len(),
                self.positions.len()
            )));
        }
        if let Some(&t) = self.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= cfg.max_context) {
            return Err(ModelError::BadInput(format!(
                "position id {p} outside max context {}",
                cfg.max_context
            )));
        }
        if let Some(b) = self
            .bins
            .iter()
            .find(|b| b.iter().any(|&x| x as usize >= cfg.spatial_bins))
        {
            return Err(ModelError::BadInput(format!(
                "bin indices {b:?} outside {} bins",
                cfg.spatial_bins
            )));
        }
        let mut cursor = 0;
        for s in &self.spans {
            if s.start != cursor || s.len == 0 || s.prefix_len > s.len {
                return Err(ModelError::BadInput(format!("bad span {s:?}")));
            }
            cursor += s.len;
        }
        if cursor != n {
            return Err(ModelError::BadInput(format!(
                "spans cover {cursor} of {n} positions"
            )));
        }
        Ok(())
    }
}

/// Logits `T × V` for every position.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    input: &ModelInput,
) -> Result<Var, ModelError> {
    input.validate(cfg)?;
    let ids: Vec<usize> = input.ids.iter().map(|&t| t as usize).collect();
    let tok = g.embedding(vars.tok_emb, &ids)?;
    let pos = g.embedding(vars.pos_emb, &input.positions)?;
    let mut h = g.add(tok, pos)?;

    let s = if cfg.attention.uses_spatial() {
        vars.spatial.encode(g, &input.bins)?
    } else {
        g.constant(Tensor::zeros(&[input.len(), cfg.d_model()]))
    };
    let spans: Vec<(usize, usize, usize)> = input
        .spans
        .iter()
        .map(|s| (s.start, s.len, s.prefix_len))
        .collect();
    let mask: Tensor<F> = build_block_mask(cfg.attention.decoder_mode, input.len(), &spans)?;

    for lv in &vars.layers {
        let x = g.layer_norm(h, lv.ln1_gain, lv.ln1_bias)?;
        let a = attention_layer(g, x, s, lv, &cfg.attention, &mask)?;
        h = g.add(h, a)?;
        let x = g.layer_norm(h, lv.ln2_gain, lv.ln2_bias)?;
        let f = g.matmul(x, lv.ff_in)?;
        let f = g.add_row(f, lv.ff_in_bias)?;
        let f = g.gelu(f);
        let f = g.matmul(f, lv.ff_out)?;
        let f = g.add_row(f, lv.ff_out_bias)?;
        h = g.add(h, f)?;
    }
    let h = g.layer_norm(h, vars.lnf_gain, vars.lnf_bias)?;
    let head = vars.lm_head.unwrap_or(vars.tok_emb);
    Ok(g.matmul_nt(h, head)?)
}

/// A model together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub weights: ModelWeights<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            weights: ModelWeights::random(&config, seed)?,
            config,
        })
    }

    /// Inference-only forward pass.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let vars = self.weights.register(&mut g, false);
        let out = forward(&mut g, &vars, &self.config, input)?;
        Ok(g.value(out).clone())
    }

    /// Switches λ gates or decoder mode without touching weights.
    pub fn with_attention(mut self, gates: (f64, f64, f64), mode: DecoderMode) -> Self {
        self.config.attention = self.config.attention.with_gates(gates.0, gates.1, gates.2);
        self.config.attention.decoder_mode = mode;
        self
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_ff: 16,
            max_context: 12,
            spatial_bins: 8,
            tie_embeddings: true,
            init_std: 0.5,
            attention: AttentionConfig {
                d_model: 8,
                n_heads: 2,
                ..AttentionConfig::default()
            },
        }
    }

    fn input(n: usize) -> ModelInput {
        let boxes: Vec<BBox> = (0..n)
            .map(|i| BBox::new(0.1 * i as f64 / n as f64, 0.2, 0.5, 0.9).unwrap())
            .collect();
        let ids: Vec<u32> = (0..n as u32).map(|i| (i * 5 + 3) % 16).collect();
        ModelInput::sequence(&ids, &boxes, 0, 8)
    }

    #[test]
    fn param_count_matches_config() {
        for tie in [true, false] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                ..tiny()
            };
            let m = Model::<f64>::new(cfg, 1).unwrap();
            assert_eq!(m.weights.num_params(), cfg.num_params());
            assert_eq!(m.weights.named().len(), m.weights.register(&mut Graph::new(), true).all().len());
        }
        let default = ModelConfig::default();
        assert!(default.num_params() < 1_000_000, "{}", default.num_params());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let x = input(6);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[6, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        assert!(matches!(
            m.logits(&input(13)),
            Err(ModelError::ContextTooLong { len: 13, max: 12 })
        ));
        let mut x = input(4);
        x.ids[0] = 99;
        assert!(matches!(m.logits(&x), Err(ModelError::TokenOutOfRange { .. })));
        let mut x = input(4);
        x.spans[0].len = 3;
        assert!(m.logits(&x).is_err());
        let x = ModelInput {
            ids: vec![],
            bins: vec![],
            positions: vec![],
            spans: vec![],
        };
        assert!(m.logits(&x).is_err());
    }

    #[test]
    fn causal_future_does_not_leak() {
        let m = Model::<f64>::new(tiny(), 5).unwrap();
        let x = input(8);
        let base = m.logits(&x).unwrap();
        let mut y = x.clone();
        y.ids[5] = (y.ids[5] + 1) % 16;
        y.bins[6] = [7, 7, 7, 7];
        let out = m.logits(&y).unwrap();
        for t in 0..5 {
            assert_eq!(base.row(t), out.row(t));
        }
        assert_ne!(base.row(5), out.row(5));
    }

    #[test]
    fn packed_spans_are_independent() {
        let m = Model::<f64>::new(tiny(), 9).unwrap();
        let a = input(5);
        let b = input(4);
        let packed = ModelInput {
            ids: [a.ids.clone(), b.ids.clone()].concat(),
            bins: [a.bins.clone(), b.bins.clone()].concat(),
            positions: [a.positions.clone(), b.positions.clone()].concat(),
            spans: vec![
                Span {
                    start: 0,
                    len: 5,
                    prefix_len: 0,
                },
                Span {
                    start: 5,
                    len: 4,
                    prefix_len: 0,
                },
            ],
        };
        let joint = m.logits(&packed).unwrap();
        let la = m.logits(&a).unwrap();
        let lb = m.logits(&b).unwrap();
        for t in 0..5 {
            for (x, y) in joint.row(t).iter().zip(la.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for t in 0..4 {
            for (x, y) in joint.row(5 + t).iter().zip(lb.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0f64]), 0);
    }
}
