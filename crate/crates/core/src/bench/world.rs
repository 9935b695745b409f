use std::collections::BTreeMap;

use crate::encoders::PAD_ID;
use crate::error::{Error, Result};

/// What a question type asks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuestionKind {
    /// "what color is the <shape>"
    Color,
    /// "what shape is the <color> one"
    Shape,
    /// "is the <shape a> left of the <shape b>": the answer flips when the
    /// two shape words are swapped.
    LeftOf,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Color => "color",
            QuestionKind::Shape => "shape",
            QuestionKind::LeftOf => "left_of",
        }
    }
}

impl std::str::FromStr for QuestionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(QuestionKind::Color),
            "shape" => Ok(QuestionKind::Shape),
            "left_of" => Ok(QuestionKind::LeftOf),
            _ => Err(Error::Parse(format!("unknown question kind '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionType {
    pub kind: QuestionKind,
    /// Token id of the type prefix word.
    pub prefix: usize,
    /// Answer ids this type can produce, in canonical order.
    pub answers: Vec<usize>,
}

/// Attribute world: object vocabulary, question types and token/answer ids.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub objects_per_image: usize,
    /// Words with no content that may be inserted after the type prefix.
    pub fillers: Vec<String>,
    pub max_fillers: usize,
    /// Question types in id order. A kind may repeat: same question, its
    /// own prefix word and its own answer prior.
    pub types: Vec<QuestionKind>,
    /// Chance that an inserted filler is a type-prefix word instead (any
    /// type), so the prefix identifies the type only through its position.
    pub prefix_filler_rate: f64,
    /// Relative frequency of each question type.
    pub type_weights: Vec<f64>,
    /// Standard deviation of Gaussian noise added to object features.
    pub noise_sigma: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            colors: s(&["red", "green", "blue", "yellow"]),
            shapes: s(&["circle", "square", "triangle", "star"]),
            objects_per_image: 4,
            fillers: s(&["the", "please", "object", "here"]),
            max_fillers: 2,
            // two relational types share the yes/no family but lean opposite ways
            types: vec![QuestionKind::Color, QuestionKind::Shape, QuestionKind::LeftOf, QuestionKind::LeftOf],
            prefix_filler_rate: 1.0,
            type_weights: vec![1.0, 1.0, 1.0, 1.0],
            noise_sigma: 0.05,
        }
    }
}

impl WorldSpec {
    pub fn kinds(&self) -> &[QuestionKind] {
        &self.types
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.objects_per_image;
        if self.colors.len() < 2 || self.shapes.len() < 2 {
            return Err(Error::Spec("need at least two colors and two shapes".into()));
        }
        if m < 2 || m > self.colors.len() || m > self.shapes.len() {
            return Err(Error::Spec(format!(
                "objects per image {m} must be in 2..=min(#colors, #shapes)"
            )));
        }
        if self.types.is_empty() {
            return Err(Error::Spec("need at least one question type".into()));
        }
        if self.type_weights.len() != self.types.len()
            || self.type_weights.iter().any(|w| !(*w >= 0.0))
            || self.type_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Spec(format!(
                "type weights must be {} non-negative numbers with a positive sum",
                self.types.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.prefix_filler_rate) {
            return Err(Error::Spec("prefix filler rate must be in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    // token layout: PAD, type prefixes, colors, shapes, fillers
    fn color_token0(&self) -> usize {
        1 + self.types.len()
    }

    pub fn color_token(&self, c: usize) -> usize {
        self.color_token0() + c
    }

    pub fn shape_token(&self, s: usize) -> usize {
        self.color_token0() + self.colors.len() + s
    }

    pub fn filler_token(&self, f: usize) -> usize {
        self.color_token0() + self.colors.len() + self.shapes.len() + f
    }

    pub fn prefix_token(&self, type_id: usize) -> usize {
        1 + type_id
    }

    pub fn vocab_size(&self) -> usize {
        self.filler_token(self.fillers.len())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = vec!["<pad>".to_string()];
        for (t, k) in self.types.iter().enumerate() {
            let nth = self.types[..t].iter().filter(|x| *x == k).count();
            v.push(match nth {
                0 => format!("Q_{}", k.as_str()),
                n => format!("Q_{}{}", k.as_str(), n + 1),
            });
        }
        v.extend(self.colors.iter().cloned());
        v.extend(self.shapes.iter().cloned());
        v.extend(self.fillers.iter().cloned());
        debug_assert_eq!(v[PAD_ID], "<pad>");
        v
    }

    // answer layout: colors, shapes, yes, no
    pub fn color_answer(&self, c: usize) -> usize {
        c
    }

    pub fn shape_answer(&self, s: usize) -> usize {
        self.colors.len() + s
    }

    pub fn yes_answer(&self) -> usize {
        self.colors.len() + self.shapes.len()
    }

    pub fn no_answer(&self) -> usize {
        self.yes_answer() + 1
    }

    pub fn num_answers(&self) -> usize {
        self.no_answer() + 1
    }

    pub fn answer_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.colors.clone();
        v.extend(self.shapes.iter().cloned());
        v.push("yes".into());
        v.push("no".into());
        v
    }

    pub fn question_types(&self) -> Vec<QuestionType> {
        self.types
            .iter()
            .enumerate()
            .map(|(t, &kind)| {
                let answers = match kind {
                    QuestionKind::Color => (0..self.colors.len()).map(|c| self.color_answer(c)).collect(),
                    QuestionKind::Shape => (0..self.shapes.len()).map(|s| self.shape_answer(s)).collect(),
                    QuestionKind::LeftOf => vec![self.yes_answer(), self.no_answer()],
                };
                QuestionType {
                    kind,
                    prefix: self.prefix_token(t),
                    answers,
                }
            })
            .collect()
    }

    /// Object feature width: one-hot color, one-hot shape, one-hot position.
    pub fn feature_dim(&self) -> usize {
        self.colors.len() + self.shapes.len() + self.objects_per_image
    }

    /// Longest question: prefix, up to two content words, fillers.
    pub fn max_question_len(&self) -> usize {
        3 + self.max_fillers
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("world.colors".into(), self.colors.join(","));
        m.insert("world.shapes".into(), self.shapes.join(","));
        m.insert("world.fillers".into(), self.fillers.join(","));
        m.insert("world.max_fillers".into(), self.max_fillers.to_string());
        m.insert(
            "world.types".into(),
            self.types.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","),
        );
        m.insert("world.prefix_filler_rate".into(), self.prefix_filler_rate.to_string());
        m.insert("world.objects_per_image".into(), self.objects_per_image.to_string());
        m.insert(
            "world.type_weights".into(),
            self.type_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        m.insert("world.noise_sigma".into(), self.noise_sigma.to_string());
        m
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let list = |v: &str| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        let bad = || Error::Parse(format!("bad value '{value}' for {key}"));
        match key {
            "world.colors" => self.colors = list(value),
            "world.shapes" => self.shapes = list(value),
            "world.fillers" => self.fillers = list(value),
            "world.max_fillers" => self.max_fillers = value.parse().map_err(|_| bad())?,
            "world.types" => {
                self.types = value
                    .split(',')
                    .map(|k| k.trim().parse())
                    .collect::<Result<_>>()?
            }
            "world.prefix_filler_rate" => self.prefix_filler_rate = value.parse().map_err(|_| bad())?,
            "world.objects_per_image" => self.objects_per_image = value.parse().map_err(|_| bad())?,
            "world.type_weights" => {
                self.type_weights = value
                    .split(',')
                    .map(|w| w.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "world.noise_sigma" => self.noise_sigma = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Question-type answer priors for the training distribution and the
/// shifted out-of-distribution split.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    /// Probability mass on each type's majority answer.
    pub rho: f64,
    /// Index (into the type's answer list) of the training majority answer, per type.
    pub train_majority: Vec<usize>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            rho: 0.8,
            train_majority: vec![0, 0, 0, 1],
        }
    }
}

impl PriorSpec {
    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        let types = world.question_types();
        if self.train_majority.len() != types.len() {
            return Err(Error::Spec(format!(
                "need one majority answer per question type ({})",
                types.len()
            )));
        }
        for (qt, &maj) in types.iter().zip(&self.train_majority) {
            let k = qt.answers.len();
            if maj >= k {
                return Err(Error::Spec(format!(
                    "majority index {maj} unreachable for type {}",
                    qt.kind.as_str()
                )));
            }
            let lo = 1.0 / k as f64;
            if !(self.rho >= lo - 1e-12 && self.rho <= 1.0) {
                return Err(Error::Spec(format!(
                    "rho {} outside [1/{k}, 1] for type {}",
                    self.rho,
                    qt.kind.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Out-of-distribution majority: the training majority shifted by one
    /// within the type's answer list.
    pub fn ood_majority(&self, type_id: usize, num_answers: usize) -> usize {
        (self.train_majority[type_id] + 1) % num_answers
    }

    fn categorical(&self, majority: usize, k: usize) -> Vec<f64> {
        let rest = if k > 1 { (1.0 - self.rho) / (k - 1) as f64 } else { 0.0 };
        (0..k).map(|i| if i == majority { self.rho } else { rest }).collect()
    }

    /// Answer distribution (over the type's answer list) for training and in-distribution test.
    pub fn train_distribution(&self, type_id: usize, k: usize) -> Vec<f64> {
        self.categorical(self.train_majority[type_id], k)
    }

    pub fn ood_distribution(&self, type_id: usize, k: usize) -> Vec<f64> {
        self.categorical(self.ood_majority(type_id, k), k)
    }

    /// Accuracy of always answering each type's training majority, under
    /// `(in-distribution, out-of-distribution)` priors.
    pub fn majority_baseline_accuracy(&self, world: &WorldSpec) -> (f64, f64) {
        let total: f64 = world.type_weights.iter().sum();
        let mut id = 0.0;
        let mut ood = 0.0;
        for (t, qt) in world.question_types().iter().enumerate() {
            let p = world.type_weights[t] / total;
            let k = qt.answers.len();
            let maj = self.train_majority[t];
            id += p * self.train_distribution(t, k)[maj];
            ood += p * self.ood_distribution(t, k)[maj];
        }
        (id, ood)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("prior.rho".into(), self.rho.to_string());
        m.insert(
            "prior.train_majority".into(),
            self.train_majority.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        m
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Parse(format!("bad value '{value}' for {key}"));
        match key {
            "prior.rho" => self.rho = value.parse().map_err(|_| bad())?,
            "prior.train_majority" => {
                self.train_majority = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}
