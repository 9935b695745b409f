use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; parameters with more entries are
    /// subsampled.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// max |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

fn eval_loss<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::domain("finite_diff_check", "loss must be scalar"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode parameter gradients of the scalar built by `f`
/// against central differences `(f(p + eps) - f(p - eps)) / 2 eps`.
///
/// Parameter values are restored bit-exactly after each probe.
pub fn finite_diff_check<F>(store: &mut ParameterStore, f: F, opts: FdOptions) -> Result<FdReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::domain("finite_diff_check", "eps must be positive"));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        g.backward(loss)?.param_grads()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone());
        let coords: Vec<usize> = if len <= opts.coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + opts.eps;
            let plus = eval_loss(store, &f);
            store.value_mut(id).data_mut()[k] = original - opts.eps;
            let minus = eval_loss(store, &f);
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[k]);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
