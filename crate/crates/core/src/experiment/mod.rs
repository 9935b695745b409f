//! Experiment driver: configuration, training loop, the four-cell
//! evaluation (id/ood x full-question/question-type-only) and report rows.

mod config;
mod report;
mod train;

pub use config::{ExperimentConfig, RunMode, TrainConfig};
pub use report::{
    aggregate, append_rows, emit_report, median, parse_report_csv, sort_rows, AggregateRow, ReportFormat,
    ReportRow, COLUMNS,
};
pub use train::{train_model, TrainLog};

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, FdOptions, FdReport};
use crate::bench::{
    evaluate, generate_dataset, pair_metrics, read_dataset, AnswerPredictor, Dataset, FrequencyBaseline,
    MetricsRecord, ModelPredictor, ProbeMode, Split,
};
use crate::encoders::{Aggregation, EncoderConfig, MhaMode, PosEncMode, ScoreMode, TokenSequence, Variant};
use crate::error::Result;
use crate::vqa::{write_checkpoint, Checkpoint, ImageFeatures, ModelConfig, VqaModel};

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub row: ReportRow,
    /// id full-q, id qtype, ood full-q, ood qtype.
    pub metrics: Vec<MetricsRecord>,
    pub log: TrainLog,
    pub checkpoint: Option<PathBuf>,
}

/// Reads `cfg.data_file` when it exists, otherwise generates from the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_file {
        Some(p) if p.exists() => read_dataset(BufReader::new(fs::File::open(p)?), &cfg.world),
        _ => generate_dataset(&cfg.world, &cfg.prior, cfg.counts, cfg.data_seed),
    }
}

pub fn model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        encoder: cfg.encoder.clone(),
        d_v: cfg.world.feature_dim(),
        num_answers: cfg.world.num_answers(),
        init_seed: cfg.seed,
    }
}

/// Evaluates the four (split x probe) cells and pairs them into %Acc/ΔGap.
pub fn evaluate_cells<P: AnswerPredictor + ?Sized>(predictor: &P, data: &Dataset, num_types: usize) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(4);
    for split in [Split::IdTest, Split::OodTest] {
        let mut full = evaluate(predictor, data.split(split), ProbeMode::FullQ, num_types)?;
        let mut qtype = evaluate(predictor, data.split(split), ProbeMode::QTypeOnly, num_types)?;
        // an all-wrong model leaves %Acc undefined; the cells are still reported
        let _ = pair_metrics(&mut full, &mut qtype);
        out.push(full);
        out.push(qtype);
    }
    Ok(out)
}

fn file_stem(variant: &str, knobs: &str, seed: u64) -> String {
    format!("{variant}-{}-seed{seed}", knobs.replace('/', "_"))
}

/// Trains (or fits the frequency baseline), evaluates, and when an output
/// directory is configured writes the checkpoint and appends the row to
/// `rows.csv` there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_dataset(cfg)?;
    let num_types = cfg.world.question_types().len();
    let label = cfg.encoder.label();
    let (variant, knobs, metrics, log, trained) = match cfg.mode {
        RunMode::Frequency => {
            let baseline = FrequencyBaseline::fit(&data.train, num_types, cfg.world.num_answers())?;
            let m = evaluate_cells(&baseline, &data, num_types)?;
            ("frequency".to_string(), "-".to_string(), m, TrainLog::default(), None)
        }
        RunMode::Model => {
            let (model, mut store) = VqaModel::new(model_config(cfg))?;
            let log = train_model(&model, &mut store, &data.train, &cfg.train, cfg.seed)?;
            let m = evaluate_cells(&ModelPredictor { model: &model, store: &store }, &data, num_types)?;
            let (v, k) = label.split_once('/').unwrap_or((&label, "-"));
            (v.to_string(), k.to_string(), m, log, Some((model, store)))
        }
    };
    let row = ReportRow::from_cells(
        &variant,
        &knobs,
        cfg.seed,
        &metrics[0],
        &metrics[1],
        &metrics[2],
        &metrics[3],
        start.elapsed().as_secs_f64(),
        &cfg.digest(),
    );
    let mut checkpoint = None;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        if let Some((model, store)) = &trained {
            let path = dir.join(format!("{}.ckpt", file_stem(&variant, &knobs, cfg.seed)));
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            write_checkpoint(&mut f, &Checkpoint::capture(model, store))?;
            checkpoint = Some(path);
        }
        let rows_path = dir.join("rows.csv");
        let existing = fs::read_to_string(&rows_path).unwrap_or_default();
        fs::write(&rows_path, append_rows(&existing, std::slice::from_ref(&row))?)?;
    }
    Ok(ExperimentOutcome {
        row,
        metrics,
        log,
        checkpoint,
    })
}

/// Every encoder configuration covered by the gradient suite, at width `d`.
pub fn gradcheck_configs(d: usize) -> Vec<EncoderConfig> {
    let mut out = Vec::new();
    for variant in [Variant::Gru, Variant::BiGru] {
        for aggregation in [Aggregation::LastHidden, Aggregation::SumPool] {
            out.push(EncoderConfig {
                aggregation,
                ..EncoderConfig::desk(variant).with_dims(d)
            });
        }
    }
    for pos_enc in [PosEncMode::Learned, PosEncMode::None, PosEncMode::Conv1d] {
        for mha_mode in [MhaMode::Copy, MhaMode::Split] {
            out.push(EncoderConfig {
                pos_enc,
                mha_mode,
                ..EncoderConfig::desk(Variant::Transformer).with_dims(d)
            });
        }
    }
    for score_mode in [ScoreMode::Concat, ScoreMode::ScaledDot] {
        for mha_mode in [MhaMode::Copy, MhaMode::Split] {
            out.push(EncoderConfig {
                score_mode,
                mha_mode,
                ..EncoderConfig::desk(Variant::Gat).with_dims(d)
            });
        }
    }
    for c in &mut out {
        c.vocab_size = 16;
        c.max_len = 8;
    }
    out
}

/// Finite-difference check of the full model loss (encoder, answer head and
/// BCE) for one encoder configuration on a random question of length `len`
/// and a random image. Every parameter is re-drawn uniformly in ±0.5 first so
/// zero-initialized biases and unit gains are probed away from their
/// starting values.
pub fn gradient_check(encoder: &EncoderConfig, len: usize, seed: u64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        encoder: encoder.clone(),
        d_v: 5,
        num_answers: 4,
        init_seed: seed,
    };
    let (model, mut store) = VqaModel::new(cfg)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let tokens = TokenSequence::checked(
        (0..len.max(1)).map(|_| rng.random_range(1..encoder.vocab_size)).collect(),
        encoder.vocab_size,
    )?;
    let image = ImageFeatures::new((0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())?;
    let answer = rng.random_range(0..4);
    finite_diff_check(
        &mut store,
        |g| model.loss(g, &tokens, &image, answer),
        FdOptions {
            coords_per_param: 64,
            seed,
            ..FdOptions::default()
        },
    )
}
