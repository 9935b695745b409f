//! Simplified bottom-up/top-down answer head: question-guided soft attention
//! over object features, element-wise fusion, two-layer classifier with
//! sigmoid outputs trained by binary cross-entropy.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::encoders::{EncoderConfig, QuestionEncoder, TokenSequence};
use crate::error::{Error, Result};

/// Object-level image features `[m x d_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    objects: Tensor,
}

impl ImageFeatures {
    pub fn new(objects: Vec<Vec<f64>>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::domain("image_features", "empty object set"));
        }
        Ok(Self {
            objects: Tensor::from_rows(&objects)?,
        })
    }

    pub fn from_tensor(objects: Tensor) -> Result<Self> {
        if objects.shape().len() != 2 {
            return Err(Error::domain("image_features", "expected [m x d_v]"));
        }
        Ok(Self { objects })
    }

    pub fn num_objects(&self) -> usize {
        self.objects.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.objects.dims2().1
    }

    pub fn tensor(&self) -> &Tensor {
        &self.objects
    }
}

/// Classifier logits; probabilities are element-wise sigmoids.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScores {
    pub logits: Vec<f64>,
}

impl AnswerScores {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
    }

    /// Highest logit; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &z) in self.logits.iter().enumerate() {
            if z > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_v: usize,
    pub num_answers: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.encoder.to_map();
        m.insert("model.d_v".into(), self.d_v.to_string());
        m.insert("model.num_answers".into(), self.num_answers.to_string());
        m.insert("model.init_seed".into(), self.init_seed.to_string());
        m
    }

    pub fn digest(&self) -> String {
        crate::encoders::config_canonical(&self.to_map())
    }

    pub fn from_digest(digest: &str) -> Result<Self> {
        let mut encoder = EncoderConfig::desk(crate::encoders::Variant::Gru);
        let (mut d_v, mut num_answers, mut init_seed) = (None, None, None);
        for kv in digest.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad digest entry '{kv}'")))?;
            let parse = |v: &str| v.parse::<u64>().map_err(|_| Error::Parse(format!("bad value for {k}")));
            match k {
                "model.d_v" => d_v = Some(parse(v)? as usize),
                "model.num_answers" => num_answers = Some(parse(v)? as usize),
                "model.init_seed" => init_seed = Some(parse(v)?),
                _ => {
                    if !encoder.apply(k, v)? {
                        return Err(Error::Parse(format!("unknown key '{k}'")));
                    }
                }
            }
        }
        Ok(Self {
            encoder,
            d_v: d_v.ok_or_else(|| Error::Parse("missing model.d_v".into()))?,
            num_answers: num_answers.ok_or_else(|| Error::Parse("missing model.num_answers".into()))?,
            init_seed: init_seed.unwrap_or(0),
        })
    }
}

#[derive(Clone, Debug)]
struct HeadParams {
    att_q_w: ParamId,
    att_q_b: ParamId,
    att_v_w: ParamId,
    att_v_b: ParamId,
    att_score: ParamId,
    img_proj_w: ParamId,
    img_proj_b: ParamId,
    cls1_w: ParamId,
    cls1_b: ParamId,
    cls2_w: ParamId,
    cls2_b: ParamId,
}

/// Question encoder plus answer head; all parameters live in one store.
#[derive(Clone, Debug)]
pub struct VqaModel {
    cfg: ModelConfig,
    encoder: QuestionEncoder,
    head: HeadParams,
}

/// Symbolic forward-pass result.
pub struct Forward {
    pub q: Var,
    pub attended: Var,
    pub image_weights: Var,
    pub logits: Var,
}

impl VqaModel {
    /// Builds the model and a freshly initialized store from `cfg.init_seed`.
    pub fn new(cfg: ModelConfig) -> Result<(Self, ParameterStore)> {
        if cfg.num_answers == 0 || cfg.d_v == 0 {
            return Err(Error::Config("answer vocabulary and d_v must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParameterStore::new();
        let encoder = QuestionEncoder::register(&mut store, &cfg.encoder, &mut rng)?;
        let (d_q, d_a, d_v, a) = (cfg.encoder.d_q, cfg.encoder.d_a, cfg.d_v, cfg.num_answers);
        let s = &mut store;
        let head = HeadParams {
            att_q_w: s.insert_glorot("head.att.q.w", d_q, d_a, &mut rng)?,
            att_q_b: s.insert_zeros("head.att.q.b", &[d_a])?,
            att_v_w: s.insert_glorot("head.att.v.w", d_v, d_a, &mut rng)?,
            att_v_b: s.insert_zeros("head.att.v.b", &[d_a])?,
            att_score: s.insert_glorot("head.att.score", d_a, 1, &mut rng)?,
            img_proj_w: s.insert_glorot("head.img.w", d_v, d_q, &mut rng)?,
            img_proj_b: s.insert_zeros("head.img.b", &[d_q])?,
            cls1_w: s.insert_glorot("head.cls1.w", d_q, d_q, &mut rng)?,
            cls1_b: s.insert_zeros("head.cls1.b", &[d_q])?,
            cls2_w: s.insert_glorot("head.cls2.w", d_q, a, &mut rng)?,
            cls2_b: s.insert_zeros("head.cls2.b", &[a])?,
        };
        Ok((
            Self {
                cfg,
                encoder,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &QuestionEncoder {
        &self.encoder
    }

    /// Soft attention over objects guided by `q` (`[1 x d_q]`):
    /// `score_j = w^T LeakyReLU(P_q q + P_v v_j)`, weights = softmax(score),
    /// output = projection of the weighted object sum into `d_q`.
    /// Returns `(attended [1 x d_q], weights [m x 1])`.
    pub fn attend_image(&self, g: &mut Graph<'_>, q: Var, image: &ImageFeatures) -> Result<(Var, Var)> {
        if image.num_objects() == 0 {
            return Err(Error::domain("attend_image", "empty object set"));
        }
        if image.dim() != self.cfg.d_v {
            return Err(Error::shape("attend_image", &[self.cfg.d_v], image.tensor().shape()));
        }
        let h = &self.head;
        let objects = g.constant(image.tensor().clone());
        let (qw, qb) = (g.param(h.att_q_w), g.param(h.att_q_b));
        let (vw, vb) = (g.param(h.att_v_w), g.param(h.att_v_b));
        let qp = g.affine(q, qw, Some(qb))?;
        let vp = g.affine(objects, vw, Some(vb))?;
        // projected question broadcast over every object row
        let joint = g.add_bias(vp, qp)?;
        let act = g.leaky_relu(joint, self.cfg.encoder.leaky_slope)?;
        let score_w = g.param(h.att_score);
        let scores = g.matmul(act, score_w)?; // [m x 1]
        let scores_row = g.transpose(scores);
        let weights_row = g.softmax_rows(scores_row)?; // [1 x m]
        let pooled = g.matmul(weights_row, objects)?; // [1 x d_v]
        let (pw, pb) = (g.param(h.img_proj_w), g.param(h.img_proj_b));
        let attended = g.affine(pooled, pw, Some(pb))?;
        let weights = g.transpose(weights_row);
        Ok((attended, weights))
    }

    /// `logits = W_2 LeakyReLU(W_1 (q * v) + b_1) + b_2`.
    pub fn fuse_predict(&self, g: &mut Graph<'_>, q: Var, v: Var) -> Result<Var> {
        if g.shape(q) != g.shape(v) {
            return Err(Error::shape("fuse_predict", g.shape(q), g.shape(v)));
        }
        let h = &self.head;
        let joint = g.mul(q, v)?;
        let (w1, b1) = (g.param(h.cls1_w), g.param(h.cls1_b));
        let (w2, b2) = (g.param(h.cls2_w), g.param(h.cls2_b));
        let hidden = g.affine(joint, w1, Some(b1))?;
        let hidden = g.leaky_relu(hidden, self.cfg.encoder.leaky_slope)?;
        g.affine(hidden, w2, Some(b2))
    }

    pub fn forward(&self, g: &mut Graph<'_>, tokens: &TokenSequence, image: &ImageFeatures) -> Result<Forward> {
        let enc = self.encoder.encode(g, tokens)?;
        let (attended, image_weights) = self.attend_image(g, enc.q, image)?;
        let logits = self.fuse_predict(g, enc.q, attended)?;
        Ok(Forward {
            q: enc.q,
            attended,
            image_weights,
            logits,
        })
    }

    pub fn predict(&self, store: &ParameterStore, tokens: &TokenSequence, image: &ImageFeatures) -> Result<AnswerScores> {
        let mut g = Graph::with_params(store);
        let f = self.forward(&mut g, tokens, image)?;
        Ok(AnswerScores {
            logits: g.value(f.logits).data().to_vec(),
        })
    }

    /// One-hot BCE training loss for a single example.
    pub fn loss(&self, g: &mut Graph<'_>, tokens: &TokenSequence, image: &ImageFeatures, answer: usize) -> Result<Var> {
        if answer >= self.cfg.num_answers {
            return Err(Error::Lookup {
                id: answer,
                limit: self.cfg.num_answers,
            });
        }
        let f = self.forward(g, tokens, image)?;
        let mut target = vec![0.0; self.cfg.num_answers];
        target[answer] = 1.0;
        g.bce_with_logits(f.logits, &target)
    }
}

/// Mean binary cross-entropy of logits against targets in `[0, 1]`,
/// evaluated without a tape.
pub fn bce_loss(scores: &AnswerScores, target: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(scores.logits.clone()));
    let l = g.bce_with_logits(z, target)?;
    Ok(g.value(l).data()[0])
}
