//! Disentangled text/spatial self-attention.
//!
//! Each head scores token pairs with four terms,
//!
//! ```text
//! A[i,j] = Qt_i·Kt_j + λts·Qt_i·Ks_j + λst·Qs_i·Kt_j + λss·Qs_i·Ks_j
//! ```
//!
//! where `Qt, Kt, Vt` project the text hidden states and `Qs, Ks` project the
//! spatial stream. Values always come from the text stream. Terms whose gate
//! is zero are left out of the graph entirely, so a model with all gates at
//! zero computes exactly the text-only scores.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var, MASK_NEG};

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionError {
    InvalidConfig(String),
    MissingPrefixLen,
    PrefixTooLong { prefix_len: usize, len: usize },
    Tensor(TensorError),
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid attention config: {msg}"),
            Self::MissingPrefixLen => write!(f, "prefix decoder mask needs a prefix length"),
            Self::PrefixTooLong { prefix_len, len } => {
                write!(f, "prefix length {prefix_len} exceeds sequence length {len}")
            }
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AttentionError {}

impl From<TensorError> for AttentionError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    #[default]
    Causal,
    /// Bidirectional within a leading prefix, causal after it.
    Prefix,
}

impl DecoderMode {
    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::Causal => "causal",
            DecoderMode::Prefix => "prefix",
        }
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "causal" => Ok(DecoderMode::Causal),
            "prefix" => Ok(DecoderMode::Prefix),
            other => Err(format!("unknown decoder mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Text query against spatial key.
    pub lambda_ts: f64,
    /// Spatial query against text key.
    pub lambda_st: f64,
    /// Spatial query against spatial key.
    pub lambda_ss: f64,
    pub decoder_mode: DecoderMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            lambda_ts: 0.0,
            lambda_st: 0.0,
            lambda_ss: 1.0,
            decoder_mode: DecoderMode::Causal,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(AttentionError::InvalidConfig(
                "d_model and n_heads must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(AttentionError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("lambda_ts", self.lambda_ts),
            ("lambda_st", self.lambda_st),
            ("lambda_ss", self.lambda_ss),
        ] {
            if !v.is_finite() {
                return Err(AttentionError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn gates(&self) -> (f64, f64, f64) {
        (self.lambda_ts, self.lambda_st, self.lambda_ss)
    }

    pub fn with_gates(mut self, ts: f64, st: f64, ss: f64) -> Self {
        self.lambda_ts = ts;
        self.lambda_st = st;
        self.lambda_ss = ss;
        self
    }

    pub fn uses_spatial(&self) -> bool {
        self.lambda_ts != 0.0 || self.lambda_st != 0.0 || self.lambda_ss != 0.0
    }
}

/// Per-layer parameters. There are exactly five attention projections; the
/// spatial stream has no value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    pub w_tq: Tensor<F>,
    pub w_tk: Tensor<F>,
    pub w_tv: Tensor<F>,
    pub w_sq: Tensor<F>,
    pub w_sk: Tensor<F>,
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub ff_in: Tensor<F>,
    pub ff_in_bias: Tensor<F>,
    pub ff_out: Tensor<F>,
    pub ff_out_bias: Tensor<F>,
}

impl<F: Scalar> LayerWeights<F> {
    pub fn random<R: Rng>(d: usize, d_ff: usize, n_layers: usize, rng: &mut R) -> Self {
        let proj = 1.0 / (d as f64).sqrt();
        // Residual-branch outputs are shrunk with depth.
        let out = 1.0 / ((d_ff as f64).sqrt() * (2.0 * n_layers.max(1) as f64).sqrt());
        Self {
            w_tq: Tensor::randn(&[d, d], proj, rng),
            w_tk: Tensor::randn(&[d, d], proj, rng),
            w_tv: Tensor::randn(&[d, d], proj, rng),
            w_sq: Tensor::randn(&[d, d], proj, rng),
            w_sk: Tensor::randn(&[d, d], proj, rng),
            ln1_gain: Tensor::full(&[d], F::one()),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], F::one()),
            ln2_bias: Tensor::zeros(&[d]),
            ff_in: Tensor::randn(&[d, d_ff], proj, rng),
            ff_in_bias: Tensor::zeros(&[d_ff]),
            ff_out: Tensor::randn(&[d_ff, d], out, rng),
            ff_out_bias: Tensor::zeros(&[d]),
        }
    }

    /// Stable `(name, tensor)` listing used by checkpoints and optimizers.
    pub fn named(&self) -> [(&'static str, &Tensor<F>); 13] {
        [
            ("w_tq", &self.w_tq),
            ("w_tk", &self.w_tk),
            ("w_tv", &self.w_tv),
            ("w_sq", &self.w_sq),
            ("w_sk", &self.w_sk),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 13] {
        [
            ("w_tq", &mut self.w_tq),
            ("w_tk", &mut self.w_tk),
            ("w_tv", &mut self.w_tv),
            ("w_sq", &mut self.w_sq),
            ("w_sk", &mut self.w_sk),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ff_in", &mut self.ff_in),
            ("ff_in_bias", &mut self.ff_in_bias),
            ("ff_out", &mut self.ff_out),
            ("ff_out_bias", &mut self.ff_out_bias),
        ]
    }

    pub fn register(&self, g: &mut Graph<F>, trainable: bool) -> LayerVars {
        let v = self.named().map(|(_, t)| g.leaf(t.clone(), trainable));
        LayerVars {
            w_tq: v[0],
            w_tk: v[1],
            w_tv: v[2],
            w_sq: v[3],
            w_sk: v[4],
            ln1_gain: v[5],
            ln1_bias: v[6],
            ln2_gain: v[7],
            ln2_bias: v[8],
            ff_in: v[9],
            ff_in_bias: v[10],
            ff_out: v[11],
            ff_out_bias: v[12],
        }
    }
}

/// Graph handles mirroring [`LayerWeights`], in the same order as
/// [`LayerWeights::named`].
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_tq: Var,
    pub w_tk: Var,
    pub w_tv: Var,
    pub w_sq: Var,
    pub w_sk: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 13] {
        [
            self.w_tq,
            self.w_tk,
            self.w_tv,
            self.w_sq,
            self.w_sk,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.ff_in,
            self.ff_in_bias,
            self.ff_out,
            self.ff_out_bias,
        ]
    }
}

/// Additive attention mask for one sequence: `0` where attention is allowed,
/// [`MASK_NEG`] elsewhere.
pub fn build_mask<F: Scalar>(
    mode: DecoderMode,
    len: usize,
    prefix_len: Option<usize>,
) -> Result<Tensor<F>, AttentionError> {
    let mut mask = Tensor::full(&[len, len], F::from_f64_lossy(MASK_NEG));
    fill_block(&mut mask, len, 0, len, mode, prefix_len)?;
    Ok(mask)
}

/// Block-diagonal mask for a packed chunk. Each span is
/// `(start, len, prefix_len)`; attention never crosses span boundaries.
pub fn build_block_mask<F: Scalar>(
    mode: DecoderMode,
    total: usize,
    spans: &[(usize, usize, usize)],
) -> Result<Tensor<F>, AttentionError> {
    let mut mask = Tensor::full(&[total, total], F::from_f64_lossy(MASK_NEG));
    for &(start, len, prefix) in spans {
        if start + len > total {
            return Err(AttentionError::InvalidConfig(format!(
                "span {start}+{len} exceeds chunk length {total}"
            )));
        }
        fill_block(&mut mask, total, start, len, mode, Some(prefix))?;
    }
    Ok(mask)
}

fn fill_block<F: Scalar>(
    mask: &mut Tensor<F>,
    total: usize,
    start: usize,
    len: usize,
    mode: DecoderMode,
    prefix_len: Option<usize>,
) -> Result<(), AttentionError> {
    let prefix = match mode {
        DecoderMode::Causal => 0,
        DecoderMode::Prefix => {
            let p = prefix_len.ok_or(AttentionError::MissingPrefixLen)?;
            if p > len {
                return Err(AttentionError::PrefixTooLong { prefix_len: p, len });
            }
            p
        }
    };
    let data = mask.data_mut();
    for i in 0..len {
        let visible = if i < prefix { prefix } else { i + 1 };
        let row = &mut data[(start + i) * total + start..(start + i) * total + start + visible];
        row.fill(F::zero());
    }
    Ok(())
}

/// Projected streams for one layer.
struct Projections {
    q_text: Var,
    v_text: Var,
    /// `Kt + λts·Ks`, paired with `Qt`.
    k_for_text_query: Var,
    /// `(Qs, λst·Kt + λss·Ks)` when either spatial-query gate is nonzero.
    spatial_query: Option<(Var, Var)>,
}

fn project<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    s: Var,
    w: &LayerVars,
    cfg: &AttentionConfig,
) -> Result<Projections, AttentionError> {
    if g.shape(h) != g.shape(s) {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(s).to_vec(),
        }
        .into());
    }
    let (ts, st, ss) = cfg.gates();
    let q_text = g.matmul(h, w.w_tq)?;
    let k_text = g.matmul(h, w.w_tk)?;
    let v_text = g.matmul(h, w.w_tv)?;
    let needs_ks = ts != 0.0 || ss != 0.0;
    let needs_qs = st != 0.0 || ss != 0.0;
    let k_spatial = if needs_ks {
        Some(g.matmul(s, w.w_sk)?)
    } else {
        None
    };

    let k_for_text_query = match k_spatial {
        Some(ks) if ts != 0.0 => {
            let scaled = g.scale(ks, F::from_f64_lossy(ts));
            g.add(k_text, scaled)?
        }
        _ => k_text,
    };

    let spatial_query = if needs_qs {
        let qs = g.matmul(s, w.w_sq)?;
        let mut key: Option<Var> = None;
        if st != 0.0 {
            key = Some(g.scale(k_text, F::from_f64_lossy(st)));
        }
        if ss != 0.0 {
            let ks = k_spatial.expect("computed when ss != 0");
            let term = g.scale(ks, F::from_f64_lossy(ss));
            key = Some(match key {
                Some(k) => g.add(k, term)?,
                None => term,
            });
        }
        Some((qs, key.expect("st or ss nonzero")))
    } else {
        None
    };

    Ok(Projections {
        q_text,
        v_text,
        k_for_text_query,
        spatial_query,
    })
}

fn head_scores<F: Scalar>(
    g: &mut Graph<F>,
    p: &Projections,
    lo: usize,
    hi: usize,
) -> Result<Var, AttentionError> {
    let qt = g.slice_cols(p.q_text, lo, hi)?;
    let kt = g.slice_cols(p.k_for_text_query, lo, hi)?;
    match p.spatial_query {
        None => Ok(g.matmul_nt(qt, kt)?),
        Some((qs, ks)) => {
            // [Qt | Qs]·[K1 | K2]ᵀ = Qt·K1ᵀ + Qs·K2ᵀ in one product.
            let qs = g.slice_cols(qs, lo, hi)?;
            let ks = g.slice_cols(ks, lo, hi)?;
            let q = g.concat_cols(&[qt, qs])?;
            let k = g.concat_cols(&[kt, ks])?;
            Ok(g.matmul_nt(q, k)?)
        }
    }
}

/// Unscaled per-head score matrices, each `T × T`.
pub fn attention_scores<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    s: Var,
    w: &LayerVars,
    cfg: &AttentionConfig,
) -> Result<Vec<Var>, AttentionError> {
    cfg.validate()?;
    let p = project(g, h, s, w, cfg)?;
    let dh = cfg.head_dim();
    (0..cfg.n_heads)
        .map(|head| head_scores(g, &p, head * dh, (head + 1) * dh))
        .collect()
}

/// One disentangled attention sublayer:
/// `concat_h softmax(A_h / √d_head + mask) · Vt_h`.
pub fn attention_layer<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    s: Var,
    w: &LayerVars,
    cfg: &AttentionConfig,
    mask: &Tensor<F>,
) -> Result<Var, AttentionError> {
    cfg.validate()?;
    let p = project(g, h, s, w, cfg)?;
    let dh = cfg.head_dim();
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let scores = head_scores(g, &p, lo, hi)?;
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_rows(scaled, Some(mask))?;
        let v = g.slice_cols(p.v_text, lo, hi)?;
        heads.push(g.matmul(probs, v)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    Ok(g.concat_cols(&heads)?)
}
