use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::autodiff::{Graph, ParameterStore};
use crate::bench::SyntheticSample;
use crate::error::{Error, Result};
use crate::vqa::VqaModel;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: u64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn norm_snapshot(store: &ParameterStore) -> String {
    store
        .norms()
        .iter()
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mini-batch AdamW on mean per-sample BCE. Batch order is drawn from `seed`.
pub fn train_model(
    model: &VqaModel,
    store: &mut ParameterStore,
    train: &[SyntheticSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let s = &train[i];
                let grads = {
                    let mut g = Graph::with_params(store);
                    // an overflow inside the forward pass is divergence too
                    let diverged = |what: String| {
                        Error::Diverged(format!(
                            "{what} at step {}; parameter norms: {}",
                            log.steps + 1,
                            norm_snapshot(store)
                        ))
                    };
                    let loss = match model.loss(&mut g, &s.tokens, &s.image, s.answer) {
                        Err(Error::NonFinite(at)) => return Err(diverged(format!("non-finite {at}"))),
                        r => r?,
                    };
                    let value = g.value(loss).data()[0];
                    if !value.is_finite() {
                        return Err(diverged("non-finite loss".into()));
                    }
                    total += value;
                    match g.backward(loss) {
                        Err(Error::NonFinite(at)) => return Err(diverged(format!("non-finite gradient ({at})"))),
                        r => r?,
                    }
                };
                grads.accumulate_into(store);
            }
            store.scale_grads(1.0 / batch.len() as f64);
            opt.step(store);
            log.steps += 1;
            if store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after step {}; parameter norms: {}",
                    log.steps,
                    norm_snapshot(store)
                )));
            }
        }
        log.epoch_losses.push(total / train.len().max(1) as f64);
    }
    Ok(log)
}
