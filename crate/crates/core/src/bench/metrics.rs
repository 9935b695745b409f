use std::fmt;
use std::str::FromStr;

use super::dataset::{Split, SyntheticSample};
use super::world::{QuestionKind, WorldSpec};
use crate::autodiff::ParameterStore;
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::vqa::{ImageFeatures, VqaModel};

/// Number of question-type prefix tokens.
pub const PREFIX_LEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeMode {
    FullQ,
    QTypeOnly,
}

impl ProbeMode {
    pub const ALL: [ProbeMode; 2] = [ProbeMode::FullQ, ProbeMode::QTypeOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::FullQ => "full-q",
            ProbeMode::QTypeOnly => "qtype",
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-q" | "full" => Ok(ProbeMode::FullQ),
            "qtype" | "q-type" => Ok(ProbeMode::QTypeOnly),
            _ => Err(Error::Parse(format!("unknown probe mode '{s}' (expected full-q or qtype)"))),
        }
    }
}

/// Prefix token id of question type `t` (token 0 is padding).
pub fn prefix_token(t: usize) -> usize {
    1 + t
}

/// Question truncated to its type prefix.
pub fn qtype_probe(sample: &SyntheticSample) -> Result<TokenSequence> {
    let ids = sample.tokens.ids();
    if ids.len() < PREFIX_LEN || ids[0] != prefix_token(sample.qtype) {
        return Err(Error::Data(format!(
            "question {:?} does not start with the prefix of type {}",
            ids, sample.qtype
        )));
    }
    TokenSequence::new(ids[..PREFIX_LEN].to_vec())
}

/// The sample with its question replaced by the probe.
pub fn probed(sample: &SyntheticSample) -> Result<SyntheticSample> {
    Ok(SyntheticSample {
        tokens: qtype_probe(sample)?,
        ..sample.clone()
    })
}

/// Anything that maps a question and an image to one answer id.
pub trait AnswerPredictor {
    fn predict_answer(&self, tokens: &TokenSequence, image: &ImageFeatures) -> Result<usize>;
}

/// A model together with its trained parameters.
pub struct ModelPredictor<'a> {
    pub model: &'a VqaModel,
    pub store: &'a ParameterStore,
}

impl AnswerPredictor for ModelPredictor<'_> {
    fn predict_answer(&self, tokens: &TokenSequence, image: &ImageFeatures) -> Result<usize> {
        Ok(self.model.predict(self.store, tokens, image)?.argmax())
    }
}

/// Predicts each question type's most frequent training answer, reading the
/// type from the prefix token and ignoring the image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBaseline {
    pub majority: Vec<usize>,
}

impl FrequencyBaseline {
    pub fn fit(train: &[SyntheticSample], num_types: usize, num_answers: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::domain("frequency_baseline", "empty training set"));
        }
        let mut counts = vec![vec![0usize; num_answers]; num_types];
        for s in train {
            if s.qtype >= num_types || s.answer >= num_answers {
                return Err(Error::Data(format!("sample type/answer ({}, {}) out of range", s.qtype, s.answer)));
            }
            counts[s.qtype][s.answer] += 1;
        }
        let majority = counts
            .iter()
            .map(|row| {
                let mut best = 0;
                for (a, &c) in row.iter().enumerate() {
                    if c > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Ok(Self { majority })
    }
}

impl AnswerPredictor for FrequencyBaseline {
    fn predict_answer(&self, tokens: &TokenSequence, _image: &ImageFeatures) -> Result<usize> {
        let first = tokens.ids()[0];
        (1..=self.majority.len())
            .contains(&first)
            .then(|| self.majority[first - 1])
            .ok_or_else(|| Error::Data(format!("token {first} is not a question-type prefix")))
    }
}

/// Reads attributes back from the (noisy) features by per-block argmax and
/// answers the question by rule.
pub struct RuleSolver<'w> {
    pub world: &'w WorldSpec,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl AnswerPredictor for RuleSolver<'_> {
    fn predict_answer(&self, tokens: &TokenSequence, image: &ImageFeatures) -> Result<usize> {
        let w = self.world;
        let (nc, ns) = (w.colors.len(), w.shapes.len());
        let objs: Vec<(usize, usize, usize)> = (0..image.num_objects())
            .map(|i| {
                let r = image.tensor().row(i);
                (argmax(&r[..nc]), argmax(&r[nc..nc + ns]), argmax(&r[nc + ns..]))
            })
            .collect();
        let ids = tokens.ids();
        let t = ids[0]
            .checked_sub(1)
            .filter(|&t| t < w.types.len())
            .ok_or_else(|| Error::Data("missing question-type prefix".into()))?;
        let colors: Vec<usize> = ids.iter().filter_map(|&x| (x >= w.color_token(0) && x < w.color_token(nc)).then(|| x - w.color_token(0))).collect();
        let shapes: Vec<usize> = ids.iter().filter_map(|&x| (x >= w.shape_token(0) && x < w.shape_token(ns)).then(|| x - w.shape_token(0))).collect();
        let find = |pred: &dyn Fn(&(usize, usize, usize)) -> bool| {
            objs.iter()
                .find(|o| pred(o))
                .copied()
                .ok_or_else(|| Error::Data("referenced object not in image".into()))
        };
        match w.question_types()[t].kind {
            QuestionKind::Color => {
                let s = *shapes.first().ok_or_else(|| Error::Data("color question without a shape".into()))?;
                Ok(w.color_answer(find(&|o| o.1 == s)?.0))
            }
            QuestionKind::Shape => {
                let c = *colors.first().ok_or_else(|| Error::Data("shape question without a color".into()))?;
                Ok(w.shape_answer(find(&|o| o.0 == c)?.1))
            }
            QuestionKind::LeftOf => {
                if shapes.len() != 2 {
                    return Err(Error::Data("left-of question needs two shapes".into()));
                }
                let a = find(&|o| o.1 == shapes[0])?;
                let b = find(&|o| o.1 == shapes[1])?;
                Ok(if a.2 < b.2 { w.yes_answer() } else { w.no_answer() })
            }
        }
    }
}

/// Accuracy figures for one (split, probe mode) cell. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub split: Split,
    pub probe: ProbeMode,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `None` for types absent from the evaluated samples.
    pub per_type: Vec<Option<f64>>,
    /// `100 * qtype / full`, set once both probe modes of the split are known.
    pub pct_acc: Option<f64>,
    /// `full - qtype`.
    pub delta_gap: Option<f64>,
}

pub fn evaluate<P: AnswerPredictor + ?Sized>(
    predictor: &P,
    samples: &[SyntheticSample],
    probe: ProbeMode,
    num_types: usize,
) -> Result<MetricsRecord> {
    let first = samples
        .first()
        .ok_or_else(|| Error::domain("evaluate", "empty sample list"))?;
    let mut hit = vec![0usize; num_types];
    let mut seen = vec![0usize; num_types];
    for s in samples {
        if s.split != first.split {
            return Err(Error::Data("evaluate: samples from more than one split".into()));
        }
        if s.qtype >= num_types {
            return Err(Error::Data(format!("question type {} out of range", s.qtype)));
        }
        let tokens = match probe {
            ProbeMode::FullQ => s.tokens.clone(),
            ProbeMode::QTypeOnly => qtype_probe(s)?,
        };
        seen[s.qtype] += 1;
        if predictor.predict_answer(&tokens, &s.image)? == s.answer {
            hit[s.qtype] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(MetricsRecord {
        split: first.split,
        probe,
        total: samples.len(),
        correct,
        accuracy: 100.0 * correct as f64 / samples.len() as f64,
        per_type: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
            .collect(),
        pct_acc: None,
        delta_gap: None,
    })
}

/// `(%Acc, ΔGap)` from full-question and question-type-only accuracies.
pub fn prior_reliance(full_acc: f64, qtype_acc: f64) -> Result<(f64, f64)> {
    if !(full_acc > 0.0) || !qtype_acc.is_finite() {
        return Err(Error::domain("prior_reliance", "full-question accuracy must be positive"));
    }
    Ok((100.0 * qtype_acc / full_acc, full_acc - qtype_acc))
}

/// Two-decimal figure as printed in result tables: truncated, not rounded
/// (60.106 prints as 60.10). The 1e-9 guard keeps values like 26.2299999..
/// produced by binary subtraction from dropping a digit.
pub fn two_decimals(x: f64) -> f64 {
    ((x * 100.0) + 1e-9).floor() / 100.0
}

/// Fills `%Acc` and `ΔGap` on both records of a split.
pub fn pair_metrics(full: &mut MetricsRecord, qtype: &mut MetricsRecord) -> Result<()> {
    if full.split != qtype.split || full.probe != ProbeMode::FullQ || qtype.probe != ProbeMode::QTypeOnly {
        return Err(Error::domain("pair_metrics", "need full-q and qtype records of the same split"));
    }
    let (pct, gap) = prior_reliance(full.accuracy, qtype.accuracy)?;
    for r in [&mut *full, &mut *qtype] {
        r.pct_acc = Some(pct);
        r.delta_gap = Some(gap);
    }
    Ok(())
}
