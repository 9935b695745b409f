//! Nested-loop re-implementations of the encoder building blocks.

use qe_core::autodiff::{Graph, ParameterStore};
use qe_core::encoders::{build_question_graph, Aggregation, EncoderConfig, MhaMode, ScoreMode, Variant, LAYER_NORM_EPS};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub fn combine(mode: MhaMode, outs: Vec<Mat>) -> Mat {
    let n = outs[0].len();
    match mode {
        MhaMode::Split => (0..n).map(|i| outs.iter().flat_map(|o| o[i].clone()).collect()).collect(),
        MhaMode::Copy => {
            let k = outs.len() as f64;
            (0..n)
                .map(|i| {
                    (0..outs[0][0].len())
                        .map(|c| outs.iter().map(|o| o[i][c]).sum::<f64>() / k)
                        .collect()
                })
                .collect()
        }
    }
}

pub fn gat_oracle(store: &ParameterStore, cfg: &EncoderConfig, x: &Mat) -> Mat {
    let (h_a, _) = cfg.head_dims();
    let n = x.len();
    let mut outs = Vec::new();
    for k in 0..cfg.heads {
        let p = |s: &str| format!("enc.gat.head{k}.{s}");
        let w1 = param(store, &p("w1"));
        let w2 = param(store, &p("w2"));
        let wa = vecp(store, &p("wa"));
        let wg = param(store, &p("wg"));
        let bg = vecp(store, &p("bg"));
        let src = matmul(x, &w1);
        let dst = matmul(x, &w2);
        let msg = affine(x, &wg, &bg);
        let mut out = vec![vec![0.0; msg[0].len()]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| match cfg.score_mode {
                    ScoreMode::Concat => {
                        let mut s = 0.0;
                        for c in 0..h_a {
                            s += wa[c] * src[i][c] + wa[h_a + c] * dst[j][c];
                        }
                        leaky(s, cfg.leaky_slope)
                    }
                    ScoreMode::ScaledDot => dot(&src[i], &dst[j]) / (h_a as f64).sqrt(),
                })
                .collect();
            let alpha = softmax(&scores);
            for j in 0..n {
                for c in 0..msg[0].len() {
                    out[i][c] += alpha[j] * msg[j][c];
                }
            }
        }
        outs.push(out);
    }
    combine(cfg.mha_mode, outs)
}

pub fn random_gat_cfg(r: &mut rand_chacha::ChaCha8Rng) -> EncoderConfig {
    let heads = r.random_range(1..=3);
    let mut cfg = EncoderConfig::desk(Variant::Gat);
    cfg.heads = heads;
    cfg.mha_mode = if r.random_bool(0.5) { MhaMode::Copy } else { MhaMode::Split };
    cfg.score_mode = if r.random_bool(0.5) { ScoreMode::Concat } else { ScoreMode::ScaledDot };
    cfg.d_w = r.random_range(2..=6);
    cfg.d_a = heads * r.random_range(1..=3);
    cfg.d_q = heads * r.random_range(1..=3);
    cfg.window = r.random_range(1..=4);
    cfg.vocab_size = 12;
    cfg
}

pub fn aggregate_oracle(store: &ParameterStore, nodes: &Mat, labels: &[usize], s: usize) -> Vec<f64> {
    let n = nodes.len();
    let kernel = store.by_name("enc.conv.kernel").unwrap();
    let (d_in, d_out) = (kernel.shape()[1], kernel.shape()[2]);
    let kd = kernel.data();
    let bias = vecp(store, "enc.conv.bias");
    let mut seq = vec![Vec::new(); n];
    for (row, &l) in labels.iter().enumerate() {
        seq[l - 1] = nodes[row].clone();
    }
    let mut pooled = vec![0.0; d_out];
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = bias[o];
            for t in 0..s {
                if i + t < n {
                    for c in 0..d_in {
                        acc += seq[i + t][c] * kd[(t * d_in + c) * d_out + o];
                    }
                }
            }
            pooled[o] += acc;
        }
    }
    pooled
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let m = row.len() as f64;
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn self_attention_oracle(store: &ParameterStore, cfg: &EncoderConfig, x: &Mat) -> Mat {
    let pre = "enc.layer0";
    let n = x.len();
    let mut outs = Vec::new();
    for k in 0..cfg.heads {
        let p = |s: &str| format!("{pre}.attn.head{k}.{s}");
        let q = affine(x, &param(store, &p("wq")), &vecp(store, &p("bq")));
        let kk = affine(x, &param(store, &p("wk")), &vecp(store, &p("bk")));
        let v = affine(x, &param(store, &p("wv")), &vecp(store, &p("bv")));
        let hd = q[0].len() as f64;
        let mut out = vec![vec![0.0; v[0].len()]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n).map(|j| dot(&q[i], &kk[j]) / hd.sqrt()).collect();
            let a = softmax(&scores);
            for j in 0..n {
                for c in 0..v[0].len() {
                    out[i][c] += a[j] * v[j][c];
                }
            }
        }
        outs.push(out);
    }
    let attn = affine(
        &combine(cfg.mha_mode, outs),
        &param(store, &format!("{pre}.attn.wo")),
        &vecp(store, &format!("{pre}.attn.bo")),
    );
    let x1 = layer_norm(
        &add(x, &attn),
        &vecp(store, &format!("{pre}.ln1.gamma")),
        &vecp(store, &format!("{pre}.ln1.beta")),
    );
    let mut hidden = affine(&x1, &param(store, &format!("{pre}.ff1.w")), &vecp(store, &format!("{pre}.ff1.b")));
    for row in &mut hidden {
        for v in row.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let ff = affine(&hidden, &param(store, &format!("{pre}.ff2.w")), &vecp(store, &format!("{pre}.ff2.b")));
    layer_norm(
        &add(&x1, &ff),
        &vecp(store, &format!("{pre}.ln2.gamma")),
        &vecp(store, &format!("{pre}.ln2.beta")),
    )
}

pub fn gru_states(store: &ParameterStore, prefix: &str, x: &Mat, order: &[usize]) -> Mat {
    let p = |s: &str| format!("{prefix}.{s}");
    let w = |s: &str| param(store, &p(s));
    let b = |s: &str| vecp(store, &p(s));
    let (w_ir, w_iz, w_in, w_hr, w_hz, w_hn) = (w("w_ir"), w("w_iz"), w("w_in"), w("w_hr"), w("w_hz"), w("w_hn"));
    let (b_ir, b_iz, b_in, b_hr, b_hz, b_hn) = (b("b_ir"), b("b_iz"), b("b_in"), b("b_hr"), b("b_hz"), b("b_hn"));
    let hdim = b_ir.len();
    let mut h = vec![0.0; hdim];
    let mut states = Vec::new();
    for &t in order {
        let xt = &x[t];
        let mut next = vec![0.0; hdim];
        for j in 0..hdim {
            let col = |m: &Mat, v: &[f64]| (0..v.len()).map(|i| v[i] * m[i][j]).sum::<f64>();
            let r = sigmoid(col(&w_ir, xt) + b_ir[j] + col(&w_hr, &h) + b_hr[j]);
            let z = sigmoid(col(&w_iz, xt) + b_iz[j] + col(&w_hz, &h) + b_hz[j]);
            let n = (col(&w_in, xt) + b_in[j] + r * (col(&w_hn, &h) + b_hn[j])).tanh();
            next[j] = (1.0 - z) * n + z * h[j];
        }
        h = next;
        states.push(h.clone());
    }
    states
}

pub fn read_out(states: &Mat, agg: Aggregation) -> Vec<f64> {
    match agg {
        Aggregation::LastHidden => states.last().unwrap().clone(),
        Aggregation::SumPool => (0..states[0].len()).map(|j| states.iter().map(|s| s[j]).sum()).collect(),
    }
}

/// Worst deviation of `gat_node_update` (and of its attention row sums from 1)
/// over `instances` random configurations.
pub fn gat_node_update_deviation(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let cfg = random_gat_cfg(&mut r);
        let (enc, store) = random_encoder(&cfg, seed);
        let n = r.random_range(1..=6);
        let x = random_mat(&mut r, n, cfg.d_w);
        let mut g = Graph::with_params(&store);
        let xv = g.input(to_tensor(&x));
        let graph = build_question_graph(&g, xv).unwrap();
        let (out, rec) = enc.gat().unwrap().gat_node_update(&mut g, &graph).unwrap();
        let got = from_tensor(g.value(out));
        worst = worst
            .max(max_abs_diff(&got, &gat_oracle(&store, &cfg, &x)))
            .max(rec.max_row_deviation());
    }
    worst
}

pub fn position_aware_aggregate_deviation(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(2000 + seed);
        let cfg = random_gat_cfg(&mut r);
        let (enc, store) = random_encoder(&cfg, seed);
        let n = r.random_range(1..=7);
        let nodes = random_mat(&mut r, n, cfg.d_q);
        let mut labels: Vec<usize> = (1..=n).collect();
        labels.shuffle(&mut r);
        let mut g = Graph::with_params(&store);
        let nv = g.input(to_tensor(&nodes));
        let q = enc.gat().unwrap().position_aware_aggregate(&mut g, nv, &labels).unwrap();
        let got = g.value(q).data().to_vec();
        let want = aggregate_oracle(&store, &nodes, &labels, cfg.window);
        worst = worst.max(max_abs_diff(&vec![got], &vec![want]));
    }
    worst
}

pub fn self_attention_layer_deviation(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(3000 + seed);
        let heads = r.random_range(1..=3);
        let mut cfg = EncoderConfig::desk(Variant::Transformer).with_dims(heads * r.random_range(1..=3));
        cfg.heads = heads;
        cfg.mha_mode = if r.random_bool(0.5) { MhaMode::Copy } else { MhaMode::Split };
        cfg.ffn_mult = r.random_range(1..=4);
        cfg.vocab_size = 10;
        let (enc, store) = random_encoder(&cfg, seed);
        let n = r.random_range(1..=6);
        let x = random_mat(&mut r, n, cfg.d_q);
        let mut g = Graph::with_params(&store);
        let xv = g.input(to_tensor(&x));
        let (y, rec) = enc.transformer_layers()[0].self_attention_layer(&mut g, xv).unwrap();
        worst = worst
            .max(max_abs_diff(&from_tensor(g.value(y)), &self_attention_oracle(&store, &cfg, &x)))
            .max(rec.max_row_deviation());
    }
    worst
}

pub fn encode_gru_deviation(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(4000 + seed);
        let variant = if r.random_bool(0.5) { Variant::Gru } else { Variant::BiGru };
        let mut cfg = EncoderConfig::desk(variant);
        cfg.aggregation = if r.random_bool(0.5) { Aggregation::LastHidden } else { Aggregation::SumPool };
        cfg.d_w = r.random_range(1..=6);
        cfg.d_q = 2 * r.random_range(1..=3);
        cfg.vocab_size = 10;
        let (enc, store) = random_encoder(&cfg, seed);
        let n = r.random_range(1..=6);
        let x = random_mat(&mut r, n, cfg.d_w);
        let mut g = Graph::with_params(&store);
        let xv = g.input(to_tensor(&x));
        let q = enc.gru().unwrap().encode_gru(&mut g, xv).unwrap();
        let got = g.value(q).data().to_vec();
        let fwd: Vec<usize> = (0..n).collect();
        let mut want = read_out(&gru_states(&store, "enc.gru.fwd", &x, &fwd), cfg.aggregation);
        if variant == Variant::BiGru {
            let rev: Vec<usize> = (0..n).rev().collect();
            want.extend(read_out(&gru_states(&store, "enc.gru.bwd", &x, &rev), cfg.aggregation));
        }
        worst = worst.max(max_abs_diff(&vec![got], &vec![want]));
    }
    worst
}
