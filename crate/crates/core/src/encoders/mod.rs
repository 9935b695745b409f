//! Question encoders mapping a token sequence to a single vector `q` of
//! width `d_q`.

mod config;
mod embedding;
mod gat;
mod gru;
mod transformer;

pub(crate) use config::canonical as config_canonical;
pub use config::{Aggregation, EncoderConfig, MhaMode, PosEncMode, ScoreMode, Variant};
pub use embedding::{EmbeddingTable, PositionTable, TokenSequence, PAD_ID};
pub use gat::{build_question_graph, label_order, GatEncoder, QuestionGraph};
pub use gru::{GruCell, GruEncoder};
pub use transformer::{TransformerLayer, LAYER_NORM_EPS};

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::Result;

/// Per-head attention weights (rows sum to one) and the raw scores.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub weights: Vec<Tensor>,
    pub scores: Vec<Tensor>,
}

impl AttentionRecord {
    /// Largest `|row sum - 1|` over all heads.
    pub fn max_row_deviation(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| {
                let (n, _) = w.dims2();
                (0..n).map(move |i| (w.row(i).iter().sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn min_weight(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.data().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Encoder output evaluated to concrete values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuestion {
    pub vector: Vec<f64>,
    pub variant: Variant,
    pub config_digest: String,
}

/// Symbolic encoder output on a graph.
pub struct EncoderOutput {
    /// `[1 x d_q]`
    pub q: Var,
    /// One record per attention layer (empty for recurrent encoders).
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
enum Body {
    Gru(GruEncoder),
    Transformer {
        input_proj: Option<(ParamId, ParamId)>,
        layers: Vec<TransformerLayer>,
        conv: Option<(ParamId, ParamId)>,
    },
    Gat(GatEncoder),
}

/// Any encoder of the zoo, selected by [`EncoderConfig::variant`].
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    cfg: EncoderConfig,
    embedding: EmbeddingTable,
    positions: Option<PositionTable>,
    body: Body,
}

impl QuestionEncoder {
    /// Registers all encoder parameters under the `enc.` prefix.
    pub fn register<R: Rng>(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embedding = EmbeddingTable::register(store, "enc.embed", cfg.vocab_size, cfg.d_w, rng)?;
        let mut positions = None;
        let body = match cfg.variant {
            Variant::Gru | Variant::BiGru => Body::Gru(GruEncoder::register(store, cfg, rng)?),
            Variant::Gat => Body::Gat(GatEncoder::register(store, cfg, rng)?),
            Variant::Transformer => {
                let input_proj = if cfg.d_w != cfg.d_q {
                    Some((
                        store.insert_glorot("enc.input_proj.w", cfg.d_w, cfg.d_q, rng)?,
                        store.insert_zeros("enc.input_proj.b", &[cfg.d_q])?,
                    ))
                } else {
                    None
                };
                if cfg.pos_enc == PosEncMode::Learned {
                    positions = Some(PositionTable::register(store, "enc.pos", cfg.max_len, cfg.d_w, rng)?);
                }
                let layers = (0..cfg.layers)
                    .map(|l| TransformerLayer::register(store, &format!("enc.layer{l}"), cfg, rng))
                    .collect::<Result<Vec<_>>>()?;
                let conv = if cfg.pos_enc == PosEncMode::Conv1d {
                    Some((
                        gat::register_conv_kernel(store, "enc.conv", cfg.window, cfg.d_q, rng)?,
                        store.insert_zeros("enc.conv.bias", &[cfg.d_q])?,
                    ))
                } else {
                    None
                };
                Body::Transformer {
                    input_proj,
                    layers,
                    conv,
                }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            embedding,
            positions,
            body,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn positions(&self) -> Option<&PositionTable> {
        self.positions.as_ref()
    }

    pub fn gru(&self) -> Option<&GruEncoder> {
        match &self.body {
            Body::Gru(e) => Some(e),
            _ => None,
        }
    }

    pub fn gat(&self) -> Option<&GatEncoder> {
        match &self.body {
            Body::Gat(e) => Some(e),
            _ => None,
        }
    }

    pub fn transformer_layers(&self) -> &[TransformerLayer] {
        match &self.body {
            Body::Transformer { layers, .. } => layers,
            _ => &[],
        }
    }

    /// Variant-specific pipeline from tokens to `[1 x d_q]`.
    pub fn encode(&self, g: &mut Graph<'_>, tokens: &TokenSequence) -> Result<EncoderOutput> {
        let embedded = self.embedding.embed(g, tokens)?;
        match &self.body {
            Body::Gru(enc) => Ok(EncoderOutput {
                q: enc.encode_gru(g, embedded)?,
                attention: Vec::new(),
            }),
            Body::Gat(enc) => {
                let graph = build_question_graph(g, embedded)?;
                let (q, record) = enc.encode_graph(g, &graph)?;
                Ok(EncoderOutput {
                    q,
                    attention: vec![record],
                })
            }
            Body::Transformer {
                input_proj,
                layers,
                conv,
            } => {
                let mut x = match &self.positions {
                    Some(p) => p.add_position_encodings(g, embedded)?,
                    None => {
                        if tokens.len() > self.cfg.max_len {
                            return Err(crate::Error::Length {
                                len: tokens.len(),
                                max: self.cfg.max_len,
                            });
                        }
                        embedded
                    }
                };
                if let Some((w, b)) = input_proj {
                    let (w, b) = (g.param(*w), g.param(*b));
                    x = g.affine(x, w, Some(b))?;
                }
                let mut attention = Vec::with_capacity(layers.len());
                for layer in layers {
                    let (y, rec) = layer.self_attention_layer(g, x)?;
                    x = y;
                    attention.push(rec);
                }
                if let Some((k, b)) = conv {
                    let (k, b) = (g.param(*k), g.param(*b));
                    x = g.conv1d_seq(x, k, b, self.cfg.window)?;
                }
                Ok(EncoderOutput {
                    q: g.sum_pool(x),
                    attention,
                })
            }
        }
    }

    /// Evaluates the encoder on a throwaway graph.
    pub fn encode_question(&self, store: &ParameterStore, tokens: &TokenSequence) -> Result<EncodedQuestion> {
        let mut g = Graph::with_params(store);
        let out = self.encode(&mut g, tokens)?;
        Ok(EncodedQuestion {
            vector: g.value(out.q).data().to_vec(),
            variant: self.cfg.variant,
            config_digest: self.cfg.digest(),
        })
    }
}
