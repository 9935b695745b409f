//! Post-norm Transformer encoder module: multi-head scaled dot-product
//! self-attention, add & layer-norm, position-wise feed-forward, add &
//! layer-norm.

use rand::Rng;

use super::config::{EncoderConfig, MhaMode};
use super::AttentionRecord;
use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Head {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    mode: MhaMode,
    head_dim: usize,
    heads: Vec<Head>,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

impl TransformerLayer {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_q;
        if cfg.mha_mode == MhaMode::Split && d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "split heads: d_q={d} not divisible by K={}",
                cfg.heads
            )));
        }
        let head_dim = match cfg.mha_mode {
            MhaMode::Copy => d,
            MhaMode::Split => d / cfg.heads,
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let p = format!("{prefix}.attn.head{k}");
            heads.push(Head {
                wq: store.insert_glorot(&format!("{p}.wq"), d, head_dim, rng)?,
                bq: store.insert_zeros(&format!("{p}.bq"), &[head_dim])?,
                wk: store.insert_glorot(&format!("{p}.wk"), d, head_dim, rng)?,
                bk: store.insert_zeros(&format!("{p}.bk"), &[head_dim])?,
                wv: store.insert_glorot(&format!("{p}.wv"), d, head_dim, rng)?,
                bv: store.insert_zeros(&format!("{p}.bv"), &[head_dim])?,
            });
        }
        let inner = d * cfg.ffn_mult.max(1);
        Ok(Self {
            mode: cfg.mha_mode,
            head_dim,
            heads,
            wo: store.insert_glorot(&format!("{prefix}.attn.wo"), d, d, rng)?,
            bo: store.insert_zeros(&format!("{prefix}.attn.bo"), &[d])?,
            ln1_gamma: store.insert(&format!("{prefix}.ln1.gamma"), Tensor::full(&[d], 1.0))?,
            ln1_beta: store.insert_zeros(&format!("{prefix}.ln1.beta"), &[d])?,
            ff1_w: store.insert_glorot(&format!("{prefix}.ff1.w"), d, inner, rng)?,
            ff1_b: store.insert_zeros(&format!("{prefix}.ff1.b"), &[inner])?,
            ff2_w: store.insert_glorot(&format!("{prefix}.ff2.w"), inner, d, rng)?,
            ff2_b: store.insert_zeros(&format!("{prefix}.ff2.b"), &[d])?,
            ln2_gamma: store.insert(&format!("{prefix}.ln2.gamma"), Tensor::full(&[d], 1.0))?,
            ln2_beta: store.insert_zeros(&format!("{prefix}.ln2.beta"), &[d])?,
        })
    }

    /// Multi-head self-attention output (before the residual), with the
    /// per-head attention weights.
    pub fn attention(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, AttentionRecord)> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut record = AttentionRecord::default();
        for h in &self.heads {
            let (wq, bq) = (g.param(h.wq), g.param(h.bq));
            let (wk, bk) = (g.param(h.wk), g.param(h.bk));
            let (wv, bv) = (g.param(h.wv), g.param(h.bv));
            let q = g.affine(x, wq, Some(bq))?;
            let k = g.affine(x, wk, Some(bk))?;
            let v = g.affine(x, wv, Some(bv))?;
            let kt = g.transpose(k);
            let raw = g.matmul(q, kt)?;
            let scores = g.scale(raw, scale);
            let alpha = g.softmax_rows(scores)?;
            record.scores.push(g.value(scores).clone());
            record.weights.push(g.value(alpha).clone());
            outs.push(g.matmul(alpha, v)?);
        }
        let combined = combine_heads(g, self.mode, &outs)?;
        let (wo, bo) = (g.param(self.wo), g.param(self.bo));
        Ok((g.affine(combined, wo, Some(bo))?, record))
    }

    fn add_norm(&self, g: &mut Graph<'_>, x: Var, y: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let s = g.add(x, y)?;
        let n = g.layer_norm_rows(s, LAYER_NORM_EPS);
        let (gm, bt) = (g.param(gamma), g.param(beta));
        let scaled = g.mul_row(n, gm)?;
        g.add_bias(scaled, bt)
    }

    /// One full module pass over `[n x d_q]`.
    pub fn self_attention_layer(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, AttentionRecord)> {
        let (attn, record) = self.attention(g, x)?;
        let x1 = self.add_norm(g, x, attn, self.ln1_gamma, self.ln1_beta)?;
        let (w1, b1) = (g.param(self.ff1_w), g.param(self.ff1_b));
        let (w2, b2) = (g.param(self.ff2_w), g.param(self.ff2_b));
        let hdn = g.affine(x1, w1, Some(b1))?;
        let hdn = g.relu(hdn);
        let ff = g.affine(hdn, w2, Some(b2))?;
        let x2 = self.add_norm(g, x1, ff, self.ln2_gamma, self.ln2_beta)?;
        Ok((x2, record))
    }
}

/// `Split` concatenates head outputs; `Copy` averages them.
pub(crate) fn combine_heads(g: &mut Graph<'_>, mode: MhaMode, outs: &[Var]) -> Result<Var> {
    match mode {
        MhaMode::Split => g.concat_cols(outs),
        MhaMode::Copy => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            Ok(g.scale(acc, 1.0 / outs.len() as f64))
        }
    }
}
