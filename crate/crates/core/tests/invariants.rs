//! Structural properties: attention normalization, permutation behaviour,
//! softmax and convolution shape laws, gradient linearity.

mod common;

use common::*;
use proptest::prelude::*;
use qe_core::autodiff::{softmax, Graph, Tensor};
use qe_core::encoders::{
    build_question_graph, EncoderConfig, MhaMode, PosEncMode, ScoreMode, TokenSequence, Variant,
};
use rand::seq::SliceRandom;

fn gat_cfg(score: ScoreMode, mode: MhaMode, window: usize, d: usize) -> EncoderConfig {
    let mut c = EncoderConfig::desk(Variant::Gat).with_dims(d);
    c.score_mode = score;
    c.mha_mode = mode;
    c.window = window;
    c.vocab_size = 20;
    c
}

fn arb_tokens(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..20, 1..=max_len)
}

fn arb_score() -> impl Strategy<Value = ScoreMode> {
    prop_oneof![Just(ScoreMode::Concat), Just(ScoreMode::ScaledDot)]
}

fn arb_mha() -> impl Strategy<Value = MhaMode> {
    prop_oneof![Just(MhaMode::Copy), Just(MhaMode::Split)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..6)) {
        let m = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(m, 0.0); r }).collect();
        let s = softmax(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for i in 0..rows.len() {
            let row = s.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..8), c in -100.0f64..100.0) {
        let a = softmax(&Tensor::from_rows(&[row.clone()]).unwrap()).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let b = softmax(&Tensor::from_rows(&[shifted]).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn conv_preserves_sequence_length(n in 1usize..9, d_in in 1usize..5, d_out in 1usize..5, s in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.input(to_tensor(&random_mat(&mut r, n, d_in)));
        let k = g.input(Tensor::new(vec![s, d_in, d_out], random_mat(&mut r, 1, s * d_in * d_out).remove(0)).unwrap());
        let b = g.input(Tensor::zeros(&[d_out]));
        let y = g.conv1d_seq(x, k, b, s).unwrap();
        prop_assert_eq!(g.shape(y), &[n, d_out][..]);
    }

    #[test]
    fn gradients_are_linear_in_the_loss(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let xm = random_mat(&mut r, 3, 4);
        let wm = random_mat(&mut r, 4, 2);
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let x = g.input(to_tensor(&xm));
            let w = g.input(to_tensor(&wm));
            let h = g.matmul(x, w).unwrap();
            let f1 = g.tanh(h);
            let f1 = g.sum_all(f1);
            let sm = g.softmax_rows(h).unwrap();
            let f2 = g.mul(sm, sm).unwrap();
            let f2 = g.sum_all(f2);
            let l1 = g.scale(f1, ca);
            let l2 = g.scale(f2, cb);
            let l = g.add(l1, l2).unwrap();
            let gr = g.backward(l).unwrap();
            (gr.wrt(&g, x), gr.wrt(&g, w))
        };
        let (gx1, gw1) = grads(1.0, 0.0);
        let (gx2, gw2) = grads(0.0, 1.0);
        let (gx, gw) = grads(a, b);
        for (comb, (p, q)) in [(gx, (gx1, gx2)), (gw, (gw1, gw2))] {
            for i in 0..comb.len() {
                let want = a * p.data()[i] + b * q.data()[i];
                prop_assert!((comb.data()[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn gat_attention_rows_sum_to_one(tokens in arb_tokens(6), score in arb_score(), mode in arb_mha(), seed in 0u64..500) {
        let cfg = gat_cfg(score, mode, 3, 4);
        let (enc, store) = random_encoder(&cfg, seed);
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &TokenSequence::new(tokens).unwrap()).unwrap();
        for rec in &out.attention {
            prop_assert!(rec.max_row_deviation() <= 1e-10);
            prop_assert!(rec.min_weight() >= 0.0);
        }
    }

    #[test]
    fn transformer_attention_rows_sum_to_one(tokens in arb_tokens(6), mode in arb_mha(), layers in 1usize..3, seed in 0u64..500) {
        let mut cfg = EncoderConfig::desk(Variant::Transformer).with_dims(4);
        cfg.mha_mode = mode;
        cfg.layers = layers;
        cfg.vocab_size = 20;
        let (enc, store) = random_encoder(&cfg, seed);
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &TokenSequence::new(tokens).unwrap()).unwrap();
        prop_assert_eq!(out.attention.len(), layers);
        for rec in &out.attention {
            prop_assert!(rec.max_row_deviation() <= 1e-10);
        }
    }

    #[test]
    fn gat_node_update_is_permutation_equivariant(n in 1usize..7, score in arb_score(), mode in arb_mha(), seed in 0u64..500) {
        let cfg = gat_cfg(score, mode, 3, 4);
        let (enc, store) = random_encoder(&cfg, seed);
        let mut r = rng(seed ^ 0x5eed);
        let x = random_mat(&mut r, n, cfg.d_w);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let mut g = Graph::with_params(&store);
        let xv = g.input(to_tensor(&x));
        let graph = build_question_graph(&g, xv).unwrap();
        let permuted = graph.permuted(&mut g, &perm).unwrap();
        let gat = enc.gat().unwrap();
        let (base, _) = gat.gat_node_update(&mut g, &graph).unwrap();
        let (moved, _) = gat.gat_node_update(&mut g, &permuted).unwrap();
        let base = from_tensor(g.value(base));
        let moved = from_tensor(g.value(moved));
        for (row, &p) in perm.iter().enumerate() {
            prop_assert!(max_abs_diff(&vec![moved[row].clone()], &vec![base[p].clone()]) <= 1e-10);
        }
        // label-ordered aggregation undoes the relisting
        let nodes_a = g.input(to_tensor(&base));
        let nodes_b = g.input(to_tensor(&moved));
        let qa = gat.position_aware_aggregate(&mut g, nodes_a, &graph.labels).unwrap();
        let qb = gat.position_aware_aggregate(&mut g, nodes_b, &permuted.labels).unwrap();
        prop_assert!(g.value(qa).max_abs_diff(g.value(qb)) <= 1e-10);
    }

    #[test]
    fn transformer_without_positions_is_permutation_invariant(tokens in arb_tokens(6), mode in arb_mha(), seed in 0u64..500) {
        let mut cfg = EncoderConfig::desk(Variant::Transformer).with_dims(4);
        cfg.pos_enc = PosEncMode::None;
        cfg.mha_mode = mode;
        cfg.vocab_size = 20;
        let (enc, store) = random_encoder(&cfg, seed);
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        perm.shuffle(&mut rng(seed));
        let seq = TokenSequence::new(tokens).unwrap();
        let a = enc.encode_question(&store, &seq).unwrap().vector;
        let b = enc.encode_question(&store, &seq.permuted(&perm)).unwrap().vector;
        prop_assert!(max_abs_diff(&vec![a], &vec![b]) <= 1e-10);
    }

    #[test]
    fn gat_with_unit_window_is_permutation_invariant(tokens in arb_tokens(6), score in arb_score(), mode in arb_mha(), seed in 0u64..500) {
        let cfg = gat_cfg(score, mode, 1, 4);
        let (enc, store) = random_encoder(&cfg, seed);
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        perm.shuffle(&mut rng(seed));
        let seq = TokenSequence::new(tokens).unwrap();
        let a = enc.encode_question(&store, &seq).unwrap().vector;
        let b = enc.encode_question(&store, &seq.permuted(&perm)).unwrap().vector;
        prop_assert!(max_abs_diff(&vec![a], &vec![b]) <= 1e-10);
    }
}

/// Two distinct adjacent words swapped: a window-3 GAT notices at generic
/// parameters. Concat scoring degenerates when every pre-activation falls on
/// one side of the LeakyReLU kink: the softmax then ignores the target node,
/// all node rows coincide and no reordering is visible, so a few seeds are
/// allowed to be blind.
#[test]
fn gat_with_window_three_sees_adjacent_swaps() {
    for score in [ScoreMode::Concat, ScoreMode::ScaledDot] {
        for mode in [MhaMode::Copy, MhaMode::Split] {
            let mut blind = Vec::new();
            for seed in 0..50u64 {
                let cfg = gat_cfg(score, mode, 3, 4);
                let (enc, store) = random_encoder(&cfg, seed);
                let seq = TokenSequence::new(vec![3, 7, 11, 5]).unwrap();
                let swapped = seq.permuted(&[0, 2, 1, 3]);
                let a = enc.encode_question(&store, &seq).unwrap().vector;
                let b = enc.encode_question(&store, &swapped).unwrap().vector;
                if max_abs_diff(&vec![a], &vec![b]) <= 1e-6 {
                    blind.push(seed);
                }
            }
            assert!(!blind.contains(&0), "{score} {mode}: blind at seed 0");
            assert!(blind.len() <= 5, "{score} {mode}: blind at seeds {blind:?}");
        }
    }
}

#[test]
fn learned_positions_break_permutation_invariance() {
    let mut cfg = EncoderConfig::desk(Variant::Transformer).with_dims(4);
    cfg.vocab_size = 20;
    let (enc, store) = random_encoder(&cfg, 1);
    let seq = TokenSequence::new(vec![3, 7, 11]).unwrap();
    let a = enc.encode_question(&store, &seq).unwrap().vector;
    let b = enc.encode_question(&store, &seq.permuted(&[1, 0, 2])).unwrap().vector;
    assert!(max_abs_diff(&vec![a], &vec![b]) > 1e-6);
}
