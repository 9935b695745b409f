//! Graph-attention question encoder.
//!
//! The question becomes a complete digraph (self-loops included) whose nodes
//! carry word embeddings and their 1-based position labels. Node features
//! are updated by multi-head graph attention:
//!
//! ```text
//! s_ij    = LeakyReLU(w_a^T [W_1^T q_i || W_2^T q_j])
//! alpha_i = softmax_j(s_i)
//! q'_i    = 1/K sum_k sum_j alpha^k_ij * W_g^k(q_j)
//! ```
//!
//! then put back in word order by label, convolved with a window-`s` 1-D
//! filter bank (right zero-padded) and sum-pooled.

use rand::Rng;

use super::config::{EncoderConfig, MhaMode, ScoreMode};
use super::transformer::combine_heads;
use super::AttentionRecord;
use crate::autodiff::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};

/// Complete digraph over question words.
#[derive(Clone, Debug)]
pub struct QuestionGraph {
    /// Node features `[n x d_w]`; row `r` belongs to the node labelled `labels[r]`.
    pub features: Var,
    /// 1-based word positions.
    pub labels: Vec<usize>,
}

impl QuestionGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Every ordered pair `(i, j)`, self-loops included.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.labels.len();
        (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)))
    }

    pub fn num_edges(&self) -> usize {
        self.labels.len() * self.labels.len()
    }

    /// The same graph with node rows listed in a different order:
    /// row `r` of the result is row `perm[r]` of `self`.
    pub fn permuted(&self, g: &mut Graph<'_>, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.labels.len() {
            return Err(Error::GraphIntegrity("permutation length mismatch".into()));
        }
        Ok(Self {
            features: g.gather(self.features, perm)?,
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
        })
    }
}

/// Nodes labelled `1..=n` in word order.
pub fn build_question_graph(g: &Graph<'_>, seq: Var) -> Result<QuestionGraph> {
    let n = g.value(seq).dims2().0;
    if n == 0 {
        return Err(Error::domain("build_question_graph", "empty question"));
    }
    Ok(QuestionGraph {
        features: seq,
        labels: (1..=n).collect(),
    })
}

/// Node order that sorts labels ascending; errors unless labels are a
/// permutation of `1..=n`.
pub fn label_order(labels: &[usize]) -> Result<Vec<usize>> {
    let n = labels.len();
    let mut order = vec![usize::MAX; n];
    for (row, &l) in labels.iter().enumerate() {
        if l == 0 || l > n {
            return Err(Error::GraphIntegrity(format!("label {l} outside 1..={n}")));
        }
        if order[l - 1] != usize::MAX {
            return Err(Error::GraphIntegrity(format!("duplicate label {l}")));
        }
        order[l - 1] = row;
    }
    Ok(order)
}

#[derive(Clone, Debug)]
struct GatHead {
    w1: ParamId,
    w2: ParamId,
    /// `[2 h_a x 1]`: first half scores the target node, second half the neighbour.
    wa: ParamId,
    wg: ParamId,
    bg: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatEncoder {
    heads: Vec<GatHead>,
    mha_mode: MhaMode,
    score_mode: ScoreMode,
    attn_dim: usize,
    slope: f64,
    window: usize,
    conv_kernel: ParamId,
    conv_bias: ParamId,
}

impl GatEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (h_a, h_q) = cfg.head_dims();
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let p = format!("enc.gat.head{k}");
            heads.push(GatHead {
                w1: store.insert_glorot(&format!("{p}.w1"), cfg.d_w, h_a, rng)?,
                w2: store.insert_glorot(&format!("{p}.w2"), cfg.d_w, h_a, rng)?,
                wa: store.insert_glorot(&format!("{p}.wa"), 2 * h_a, 1, rng)?,
                wg: store.insert_glorot(&format!("{p}.wg"), cfg.d_w, h_q, rng)?,
                bg: store.insert_zeros(&format!("{p}.bg"), &[h_q])?,
            });
        }
        let conv_kernel = register_conv_kernel(store, "enc.conv", cfg.window, cfg.d_q, rng)?;
        let conv_bias = store.insert_zeros("enc.conv.bias", &[cfg.d_q])?;
        Ok(Self {
            heads,
            mha_mode: cfg.mha_mode,
            score_mode: cfg.score_mode,
            attn_dim: h_a,
            slope: cfg.leaky_slope,
            window: cfg.window,
            conv_kernel,
            conv_bias,
        })
    }

    /// Multi-head attention over the complete digraph. Output row `r` is the
    /// updated feature of input row `r` (labels unchanged).
    pub fn gat_node_update(
        &self,
        g: &mut Graph<'_>,
        graph: &QuestionGraph,
    ) -> Result<(Var, AttentionRecord)> {
        let x = graph.features;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut record = AttentionRecord::default();
        for h in &self.heads {
            let (w1, w2) = (g.param(h.w1), g.param(h.w2));
            let src = g.matmul(x, w1)?;
            let dst = g.matmul(x, w2)?;
            let scores = match self.score_mode {
                ScoreMode::Concat => {
                    let wa = g.param(h.wa);
                    let wa_src = g.slice_rows(wa, 0, self.attn_dim)?;
                    let wa_dst = g.slice_rows(wa, self.attn_dim, self.attn_dim)?;
                    let e_src = g.matmul(src, wa_src)?;
                    let e_dst = g.matmul(dst, wa_dst)?;
                    let pre = g.outer_add(e_src, e_dst);
                    g.leaky_relu(pre, self.slope)?
                }
                ScoreMode::ScaledDot => {
                    let dst_t = g.transpose(dst);
                    let raw = g.matmul(src, dst_t)?;
                    g.scale(raw, 1.0 / (self.attn_dim as f64).sqrt())
                }
            };
            let alpha = g.softmax_rows(scores)?;
            record.scores.push(g.value(scores).clone());
            record.weights.push(g.value(alpha).clone());
            let (wg, bg) = (g.param(h.wg), g.param(h.bg));
            let msg = g.affine(x, wg, Some(bg))?;
            outs.push(g.matmul(alpha, msg)?);
        }
        Ok((combine_heads(g, self.mha_mode, &outs)?, record))
    }

    /// Label-ordered 1-D convolution followed by sum-pooling: `[n x d_q] -> [1 x d_q]`.
    pub fn position_aware_aggregate(&self, g: &mut Graph<'_>, nodes: Var, labels: &[usize]) -> Result<Var> {
        let order = label_order(labels)?;
        let seq = g.gather(nodes, &order)?;
        let (k, b) = (g.param(self.conv_kernel), g.param(self.conv_bias));
        let conv = g.conv1d_seq(seq, k, b, self.window)?;
        Ok(g.sum_pool(conv))
    }

    pub fn encode_graph(&self, g: &mut Graph<'_>, graph: &QuestionGraph) -> Result<(Var, AttentionRecord)> {
        let (nodes, record) = self.gat_node_update(g, graph)?;
        Ok((self.position_aware_aggregate(g, nodes, &graph.labels)?, record))
    }
}

/// Kernel `[s x d x d]`, Glorot-scaled on `(s d, d)`.
pub(crate) fn register_conv_kernel<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    window: usize,
    d: usize,
    rng: &mut R,
) -> Result<ParamId> {
    let limit = (6.0 / (window * d + d) as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.kernel"), &[window, d, d], limit, rng)
}
