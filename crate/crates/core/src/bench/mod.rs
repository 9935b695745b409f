//! Synthetic question-answering benchmark with skewed question-type answer
//! priors, a shifted-prior test split, the question-type-only probe and the
//! prior-reliance metrics.

mod dataset;
mod metrics;
mod world;

pub use dataset::{
    generate_dataset, generate_sample, read_dataset, render_image, write_dataset, Dataset, ObjectAttrs, Split,
    SplitCounts, SyntheticSample,
};
pub use metrics::{
    evaluate, pair_metrics, prefix_token, prior_reliance, probed, qtype_probe, two_decimals, AnswerPredictor,
    FrequencyBaseline, MetricsRecord, ModelPredictor, ProbeMode, RuleSolver, PREFIX_LEN,
};
pub use world::{PriorSpec, QuestionKind, QuestionType, WorldSpec};
