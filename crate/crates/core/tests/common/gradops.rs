//! Finite-difference checks for every graph op and for a micro model.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_lm::attention::{attention_layer, build_mask, AttentionConfig, DecoderMode, LayerVars};
use spatial_lm::model::{forward, Model, ModelConfig, ModelInput, ModelVars};
use spatial_lm::spatial::{BBox, SpatialVars};
use spatial_lm::tensor::gradcheck::{check, Coordinates};
use spatial_lm::tensor::{Graph, Tensor, TensorError, Var};

pub const EPS: f64 = 1e-5;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var, TensorError>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

fn to_tensor_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

pub fn layer_vars(v: &[Var]) -> LayerVars {
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

/// Every differentiable op, each with inputs in [-2, 2].
pub fn op_cases() -> Vec<OpCase> {
    let causal = build_mask::<f64>(DecoderMode::Causal, 4, None).expect("mask");
    let attn = AttentionConfig {
        d_model: 6,
        n_heads: 2,
        ..AttentionConfig::default()
    }
    .with_gates(0.7, 1.0, 1.3);
    let prefix = build_mask::<f64>(DecoderMode::Prefix, 4, Some(2)).expect("mask");
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, v, _| g.matmul(v[0], v[1])),
        case("matmul_nt", &[&[3, 4], &[5, 4]], |g, v, _| g.matmul_nt(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, v, _| g.add(v[0], v[1])),
        case("add_row", &[&[3, 4], &[4]], |g, v, _| g.add_row(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v, _| g.mul(v[0], v[1])),
        case("scale", &[&[3, 4]], |g, v, t| Ok(g.scale(v[0], 0.3 + t as f64 * 0.1))),
        case("gelu", &[&[4, 5]], |g, v, _| Ok(g.gelu(v[0]))),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, v, _| g.layer_norm(v[0], v[1], v[2])),
        case("embedding", &[&[5, 3]], |g, v, t| g.embedding(v[0], &[t as usize % 5, 2, 4, 2, 0])),
        case("transpose", &[&[3, 5]], |g, v, _| g.transpose(v[0])),
        case("concat_cols", &[&[3, 2], &[3, 4], &[3, 1]], |g, v, _| g.concat_cols(v)),
        case("concat_rows", &[&[2, 3], &[4, 3]], |g, v, _| g.concat_rows(v)),
        case("slice_cols", &[&[3, 6]], |g, v, _| g.slice_cols(v[0], 1, 4)),
        case("slice_rows", &[&[6, 3]], |g, v, _| g.slice_rows(v[0], 2, 5)),
        case("softmax_rows", &[&[4, 4]], |g, v, _| g.softmax_rows(v[0], None)),
        case("softmax_rows masked", &[&[4, 4]], move |g, v, _| g.softmax_rows(v[0], Some(&causal))),
        case("cross_entropy", &[&[5, 7]], |g, v, t| {
            let mut rng = ChaCha8Rng::seed_from_u64(t);
            let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..7)).collect();
            g.cross_entropy(v[0], &targets, &[true, false, true, true, t % 2 == 0])
        }),
        case("sum", &[&[3, 3]], |g, v, _| Ok(g.sum(v[0]))),
        case("fan-out", &[&[3, 3], &[3, 3]], |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            let mm = g.matmul(v[0], v[1])?;
            let s = g.add(sq, mm)?;
            g.add(s, v[0])
        }),
        case("attention projections", &[&[4, 6], &[4, 6], &[6, 6], &[6, 6], &[6, 6], &[6, 6], &[6, 6]], move |g, v, _| {
            // Weights enter scaled to [-0.6, 0.6]; at [-2, 2] the softmax
            // saturates and differences drown in rounding.
            let w: Vec<Var> = v[2..].iter().map(|&x| g.scale(x, 0.3)).collect();
            let z = g.constant(Tensor::zeros(&[1]));
            let mut lv = layer_vars(&[z; 13]);
            (lv.w_tq, lv.w_tk, lv.w_tv, lv.w_sq, lv.w_sk) = (w[0], w[1], w[2], w[3], w[4]);
            attention_layer(g, v[0], v[1], &lv, &attn, &prefix).map_err(to_tensor_err)
        }),
    ]
}

/// Worst relative error of `case` over `trials` random draws. The op output
/// is contracted with a fixed random weight so every entry has a distinct
/// upstream gradient.
pub fn check_op(case: &OpCase, trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| uniform(s, &mut rng)).collect();
        let report = check(&inputs, EPS, &Coordinates::All, |g, v| {
            let out = (case.f)(g, v, trial)?;
            let mut wr = ChaCha8Rng::seed_from_u64(trial ^ 0x5eed);
            let w = g.constant(uniform(g.shape(out), &mut wr));
            let p = g.mul(out, w)?;
            Ok(g.sum(p))
        })
        .expect("op builds");
        worst = worst.max(report.max_rel_err);
    }
    worst
}

pub fn micro_config() -> ModelConfig {
    let mut c = ModelConfig {
        vocab_size: 11,
        n_layers: 1,
        d_ff: 16,
        max_context: 4,
        spatial_bins: 8,
        ..ModelConfig::default()
    };
    c.attention.d_model = 8;
    c.attention.n_heads = 2;
    c.attention = c.attention.with_gates(1.0, 1.0, 1.0);
    c
}

fn model_vars(cfg: &ModelConfig, v: &[Var]) -> ModelVars {
    let mut i = 6;
    let layers = (0..cfg.n_layers)
        .map(|_| {
            let l = layer_vars(&v[i..i + 13]);
            i += 13;
            l
        })
        .collect();
    ModelVars {
        tok_emb: v[0],
        pos_emb: v[1],
        spatial: SpatialVars {
            tables: [v[2], v[3], v[4], v[5]],
        },
        layers,
        lnf_gain: v[i],
        lnf_bias: v[i + 1],
        lm_head: v.get(i + 2).copied(),
    }
}

/// Cross-entropy of a 1-layer, d=8, T=4 model with all gates on; five
/// coordinates of every weight tensor per trial. Returns the worst relative
/// error and the number of coordinates checked.
pub fn check_micro_model(trials: u64) -> (f64, usize) {
    let cfg = micro_config();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut model = Model::<f64>::new(cfg, trial).expect("valid config");
        for (_, t) in model.weights.named_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
        let ids: Vec<u32> = (0..4).map(|_| rng.gen_range(0..11)).collect();
        let boxes: Vec<BBox> = (0..4)
            .map(|_| {
                let (l, t) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
                BBox::new(l, t, l + 0.4, t + 0.3).expect("in range")
            })
            .collect();
        let input = ModelInput::sequence(&ids, &boxes, 0, cfg.spatial_bins);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..11)).collect();
        let inputs: Vec<Tensor<f64>> = model.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..5).map(move |k| (i, (k * 7919 + i * 31 + trial as usize) % t.numel())))
            .collect();
        let r = check(&inputs, EPS, &Coordinates::Only(coords), |g, v| {
            let vars = model_vars(&cfg, v);
            let logits = forward(g, &vars, &cfg, &input).map_err(to_tensor_err)?;
            g.cross_entropy(logits, &targets, &[true; 4])
        })
        .expect("model builds");
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
    }
    (worst, checked)
}
