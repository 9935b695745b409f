//! Graph implementations against plain nested-loop re-implementations.

mod common;

use common::oracles::*;
use common::*;
use qe_core::autodiff::{Graph, ParameterStore};
use qe_core::encoders::{EncoderConfig, PosEncMode, TokenSequence, Variant};
use qe_core::vqa::{bce_loss, AnswerScores, ImageFeatures, ModelConfig, VqaModel};
use rand::Rng;

const TOL: f64 = 1e-10;
const INSTANCES: u64 = 100;

#[test]
fn gat_node_update_matches_loop_oracle() {
    let worst = gat_node_update_deviation(INSTANCES);
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn position_aware_aggregate_matches_loop_oracle() {
    let worst = position_aware_aggregate_deviation(INSTANCES);
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn self_attention_layer_matches_loop_oracle() {
    let worst = self_attention_layer_deviation(INSTANCES);
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn encode_gru_matches_loop_oracle() {
    let worst = encode_gru_deviation(INSTANCES);
    assert!(worst <= TOL, "max deviation {worst:e}");
}

fn head_oracle(store: &ParameterStore, q: &[f64], image: &Mat, slope: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let qp = affine(&vec![q.to_vec()], &param(store, "head.att.q.w"), &vecp(store, "head.att.q.b"))[0].clone();
    let vp = affine(image, &param(store, "head.att.v.w"), &vecp(store, "head.att.v.b"));
    let score_w = vecp(store, "head.att.score");
    let scores: Vec<f64> = vp
        .iter()
        .map(|row| row.iter().zip(&qp).zip(&score_w).map(|((v, q), w)| w * leaky(v + q, slope)).sum())
        .collect();
    let weights = softmax(&scores);
    let mut pooled = vec![0.0; image[0].len()];
    for (j, row) in image.iter().enumerate() {
        for c in 0..row.len() {
            pooled[c] += weights[j] * row[c];
        }
    }
    let attended = affine(&vec![pooled], &param(store, "head.img.w"), &vecp(store, "head.img.b"))[0].clone();
    let joint: Vec<f64> = q.iter().zip(&attended).map(|(a, b)| a * b).collect();
    let mut hidden = affine(&vec![joint], &param(store, "head.cls1.w"), &vecp(store, "head.cls1.b"));
    for v in hidden[0].iter_mut() {
        *v = leaky(*v, slope);
    }
    let logits = affine(&hidden, &param(store, "head.cls2.w"), &vecp(store, "head.cls2.b"))[0].clone();
    (weights, attended, logits)
}

#[test]
fn answer_head_matches_loop_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut r = rng(5000 + seed);
        let mut enc = EncoderConfig::desk(Variant::Transformer).with_dims(4);
        enc.pos_enc = PosEncMode::None;
        enc.vocab_size = 10;
        let cfg = ModelConfig {
            encoder: enc,
            d_v: r.random_range(1..=6),
            num_answers: r.random_range(1..=5),
            init_seed: seed,
        };
        let (model, mut store) = VqaModel::new(cfg.clone()).unwrap();
        randomize(&mut store, &mut r, 0.5);
        let m = r.random_range(1..=5);
        let image_rows = random_mat(&mut r, m, cfg.d_v);
        let image = ImageFeatures::new(image_rows.clone()).unwrap();
        let tokens = TokenSequence::new((0..r.random_range(1..=4)).map(|_| r.random_range(1..10)).collect()).unwrap();
        let mut g = Graph::with_params(&store);
        let f = model.forward(&mut g, &tokens, &image).unwrap();
        let q = g.value(f.q).data().to_vec();
        let (w, att, logits) = head_oracle(&store, &q, &image_rows, cfg.encoder.leaky_slope);
        worst = worst
            .max(max_abs_diff(&vec![g.value(f.image_weights).data().to_vec()], &vec![w]))
            .max(max_abs_diff(&vec![g.value(f.attended).data().to_vec()], &vec![att]))
            .max(max_abs_diff(&vec![g.value(f.logits).data().to_vec()], &vec![logits.clone()]));

        let answer = r.random_range(0..cfg.num_answers);
        let target: Vec<f64> = (0..cfg.num_answers).map(|a| if a == answer { 1.0 } else { 0.0 }).collect();
        let naive: f64 = logits
            .iter()
            .zip(&target)
            .map(|(&z, &t)| {
                let p = sigmoid(z);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;
        let got = bce_loss(&AnswerScores { logits }, &target).unwrap();
        assert!((got - naive).abs() <= 1e-9, "bce {got} vs {naive}");
    }
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn conv1d_transformer_encoder_matches_composed_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(6000 + seed);
        let mut cfg = EncoderConfig::desk(Variant::Transformer).with_dims(4);
        cfg.pos_enc = PosEncMode::Conv1d;
        cfg.window = r.random_range(1..=4);
        cfg.vocab_size = 10;
        let (enc, store) = random_encoder(&cfg, seed);
        let n = r.random_range(1..=6);
        let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
        let emb = param(&store, "enc.embed");
        let x: Mat = ids.iter().map(|&i| emb[i].clone()).collect();
        let layer_out = self_attention_oracle(&store, &cfg, &x);
        let labels: Vec<usize> = (1..=n).collect();
        let want = aggregate_oracle(&store, &layer_out, &labels, cfg.window);
        let got = enc.encode_question(&store, &TokenSequence::new(ids).unwrap()).unwrap().vector;
        assert!(max_abs_diff(&vec![got], &vec![want]) <= TOL);
    }
}
