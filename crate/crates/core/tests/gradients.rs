//! Reverse-mode gradients against central finite differences.

use qe_core::autodiff::{finite_diff_check, FdOptions, Graph, ParameterStore, Tensor};
use qe_core::experiment::{gradcheck_configs, gradient_check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_encoder_variant_passes_gradient_check() {
    for cfg in gradcheck_configs(8) {
        for len in [1, 3, 6] {
            let report = gradient_check(&cfg, len, 11 + len as u64).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "{} len {len}: {:e} at {}[{}]",
                cfg.label(),
                report.max_rel_error,
                report.worst_param,
                report.worst_index
            );
        }
    }
}

#[test]
fn small_odd_widths_pass_gradient_check() {
    for cfg in gradcheck_configs(4) {
        let report = gradient_check(&cfg, 5, 3).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}: {:e}", cfg.label(), report.max_rel_error);
    }
}

fn primitive_store(seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    let mut put = |name: &str, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
    };
    put("x", &[4, 3]);
    put("w", &[3, 5]);
    put("b", &[5]);
    put("k", &[2, 5, 3]);
    put("kb", &[3]);
    put("gain", &[5]);
    s
}

#[test]
fn composed_primitives_pass_gradient_check() {
    for seed in 0..10 {
        let mut store = primitive_store(seed);
        let report = finite_diff_check(
            &mut store,
            |g: &mut Graph<'_>| {
                let x = g.param_by_name("x")?;
                let w = g.param_by_name("w")?;
                let b = g.param_by_name("b")?;
                let k = g.param_by_name("k")?;
                let kb = g.param_by_name("kb")?;
                let gain = g.param_by_name("gain")?;
                let h = g.affine(x, w, Some(b))?;
                let h = g.layer_norm_rows(h, 1e-5);
                let h = g.mul_row(h, gain)?;
                let h = g.tanh(h);
                let c = g.conv1d_seq(h, k, kb, 2)?;
                let ct = g.transpose(c);
                let s = g.softmax_rows(ct)?;
                let pieces = [g.slice_cols(s, 0, 2)?, g.slice_cols(s, 2, 2)?];
                let cat = g.concat_rows(&pieces)?;
                let sig = g.sigmoid(cat);
                let z = g.sum_pool(sig);
                g.bce_with_logits(z, &[0.0, 1.0])
            },
            FdOptions {
                seed,
                coords_per_param: 64,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "seed {seed}: {:e}", report.max_rel_error);
    }
}
