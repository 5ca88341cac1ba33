//! Plain-loop reference of the text-only decoder, written from the
//! architecture description rather than from the graph code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_lm::model::{Model, ModelConfig, ModelInput, ModelWeights};
use spatial_lm::spatial::BBox;
use spatial_lm::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[c] + b[c])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention where head `h` scores are `score(h, i, j)`.
pub fn attend(t: usize, d: usize, heads: usize, v: &Mat, visible: &dyn Fn(usize, usize) -> bool, score: &dyn Fn(usize, usize, usize) -> f64) -> Mat {
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let cols: Vec<usize> = (0..t).filter(|&j| visible(i, j)).collect();
            let s: Vec<f64> = cols.iter().map(|&j| score(h, i, j) / (dh as f64).sqrt()).collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
            for (&j, sv) in cols.iter().zip(&s) {
                let p = (sv - max).exp() / z;
                for c in h * dh..(h + 1) * dh {
                    out[i][c] += p * v[j][c];
                }
            }
        }
    }
    out
}

pub fn head_dot(a: &Mat, b: &Mat, h: usize, dh: usize, i: usize, j: usize) -> f64 {
    (h * dh..(h + 1) * dh).map(|c| a[i][c] * b[j][c]).sum()
}

/// Text-only causal decoder.
pub fn reference_logits(w: &ModelWeights<f64>, cfg: &ModelConfig, ids: &[u32]) -> Mat {
    let t = ids.len();
    let d = cfg.d_model();
    let heads = cfg.n_heads();
    let dh = d / heads;
    let tok = mat(&w.tok_emb);
    let pos = mat(&w.pos_emb);
    let mut h: Mat = (0..t)
        .map(|i| (0..d).map(|c| tok[ids[i] as usize][c] + pos[i][c]).collect())
        .collect();
    for l in &w.layers {
        let x = layer_norm(&h, l.ln1_gain.data(), l.ln1_bias.data());
        let q = mm(&x, &mat(&l.w_tq));
        let k = mm(&x, &mat(&l.w_tk));
        let v = mm(&x, &mat(&l.w_tv));
        let a = attend(t, d, heads, &v, &|i, j| j <= i, &|hd, i, j| head_dot(&q, &k, hd, dh, i, j));
        for i in 0..t {
            for c in 0..d {
                h[i][c] += a[i][c];
            }
        }
        let x = layer_norm(&h, l.ln2_gain.data(), l.ln2_bias.data());
        let mut f = mm(&x, &mat(&l.ff_in));
        for row in &mut f {
            for (c, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + l.ff_in_bias.data()[c]);
            }
        }
        let f = mm(&f, &mat(&l.ff_out));
        for i in 0..t {
            for c in 0..d {
                h[i][c] += f[i][c] + l.ff_out_bias.data()[c];
            }
        }
    }
    let h = layer_norm(&h, w.lnf_gain.data(), w.lnf_bias.data());
    h.iter()
        .map(|row| tok.iter().map(|e| row.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

pub fn config(gates: (f64, f64, f64)) -> ModelConfig {
    let mut c = ModelConfig {
        vocab_size: 23,
        n_layers: 2,
        d_ff: 24,
        max_context: 12,
        spatial_bins: 16,
        ..ModelConfig::default()
    };
    c.attention.d_model = 12;
    c.attention.n_heads = 3;
    c.attention = c.attention.with_gates(gates.0, gates.1, gates.2);
    c
}

pub fn random_boxes(n: usize, rng: &mut impl Rng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let (l, t) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
            BBox::new(l, t, l + rng.gen_range(0.0..0.4), t + rng.gen_range(0.0..0.4)).unwrap()
        })
        .collect()
}

pub fn randomize(model: &mut Model<f64>, rng: &mut impl Rng) {
    for (_, t) in model.weights.named_mut() {
        *t = Tensor::randn(t.shape(), 0.4, rng);
    }
}

/// Largest |logit difference| between a gate-zero model and the reference
/// over `trials` random models and inputs.
pub fn gate_zero_max_diff(trials: u64) -> f64 {
    let cfg = config((0.0, 0.0, 0.0));
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut model = Model::<f64>::new(cfg, trial).unwrap();
        randomize(&mut model, &mut rng);
        let t = rng.gen_range(1..=12);
        let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..23)).collect();
        let input = ModelInput::sequence(&ids, &random_boxes(t, &mut rng), 0, cfg.spatial_bins);
        let got = model.logits(&input).unwrap();
        let want = reference_logits(&model.weights, &cfg, &ids);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((got.get(i, j) - v).abs());
            }
        }
    }
    worst
}
