#![allow(dead_code)]

use qe_core::autodiff::{ParameterStore, Tensor};
use qe_core::encoders::{EncoderConfig, QuestionEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracles;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites every parameter with uniform(-scale, scale) values so that
/// zero-initialized biases and unit gains are exercised too.
pub fn randomize(store: &mut ParameterStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

pub fn random_mat(r: &mut ChaCha8Rng, n: usize, m: usize) -> Mat {
    (0..n).map(|_| (0..m).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Mat {
    let (n, _) = t.dims2();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Parameter as a matrix; vectors become a single row.
pub fn param(store: &ParameterStore, name: &str) -> Mat {
    from_tensor(store.by_name(name).unwrap())
}

pub fn vecp(store: &ParameterStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn affine(a: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = matmul(a, w);
    for row in &mut out {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Random encoder plus store with every parameter randomized.
pub fn random_encoder(cfg: &EncoderConfig, seed: u64) -> (QuestionEncoder, ParameterStore) {
    let mut r = rng(seed);
    let mut store = ParameterStore::new();
    let enc = QuestionEncoder::register(&mut store, cfg, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    (enc, store)
}
