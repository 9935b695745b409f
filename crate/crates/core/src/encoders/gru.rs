//! Gated recurrent encoders: unidirectional and bidirectional, with
//! last-hidden or sum-pooled read-out.
//!
//! Cell equations (PyTorch convention, separate input and hidden biases):
//!
//! ```text
//! r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//! z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//! n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use rand::Rng;

use super::config::{Aggregation, EncoderConfig, Variant};
use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GruCell {
    pub hidden: usize,
    w_ir: ParamId,
    w_iz: ParamId,
    w_in: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_ir: ParamId,
    b_iz: ParamId,
    b_in: ParamId,
    b_hr: ParamId,
    b_hz: ParamId,
    b_hn: ParamId,
}

/// Bound parameter leaves for one cell, so a sequence reuses them.
struct CellVars {
    w_ir: Var,
    w_iz: Var,
    w_in: Var,
    w_hr: Var,
    w_hz: Var,
    w_hn: Var,
    b_ir: Var,
    b_iz: Var,
    b_in: Var,
    b_hr: Var,
    b_hz: Var,
    b_hn: Var,
}

impl GruCell {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |s: &mut ParameterStore, n: &str, fan_in| {
            s.insert_glorot(&format!("{prefix}.{n}"), fan_in, hidden, rng)
        };
        let w_ir = w(store, "w_ir", input)?;
        let w_iz = w(store, "w_iz", input)?;
        let w_in = w(store, "w_in", input)?;
        let w_hr = w(store, "w_hr", hidden)?;
        let w_hz = w(store, "w_hz", hidden)?;
        let w_hn = w(store, "w_hn", hidden)?;
        let mut b = |n: &str| store.insert_zeros(&format!("{prefix}.{n}"), &[hidden]);
        Ok(Self {
            hidden,
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_ir: b("b_ir")?,
            b_iz: b("b_iz")?,
            b_in: b("b_in")?,
            b_hr: b("b_hr")?,
            b_hz: b("b_hz")?,
            b_hn: b("b_hn")?,
        })
    }

    fn bind(&self, g: &mut Graph<'_>) -> CellVars {
        CellVars {
            w_ir: g.param(self.w_ir),
            w_iz: g.param(self.w_iz),
            w_in: g.param(self.w_in),
            w_hr: g.param(self.w_hr),
            w_hz: g.param(self.w_hz),
            w_hn: g.param(self.w_hn),
            b_ir: g.param(self.b_ir),
            b_iz: g.param(self.b_iz),
            b_in: g.param(self.b_in),
            b_hr: g.param(self.b_hr),
            b_hz: g.param(self.b_hz),
            b_hn: g.param(self.b_hn),
        }
    }

    fn step(g: &mut Graph<'_>, c: &CellVars, x: Var, h: Var) -> Result<Var> {
        let xr = g.affine(x, c.w_ir, Some(c.b_ir))?;
        let hr = g.affine(h, c.w_hr, Some(c.b_hr))?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);

        let xz = g.affine(x, c.w_iz, Some(c.b_iz))?;
        let hz = g.affine(h, c.w_hz, Some(c.b_hz))?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);

        let xn = g.affine(x, c.w_in, Some(c.b_in))?;
        let hn = g.affine(h, c.w_hn, Some(c.b_hn))?;
        let gated = g.mul(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n);

        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let carry = g.mul(z, diff)?;
        g.add(n, carry)
    }

    /// Hidden states `h_1..h_n` for rows of `seq` taken in `order`.
    pub fn run(&self, g: &mut Graph<'_>, seq: Var, order: &[usize]) -> Result<Vec<Var>> {
        let vars = self.bind(g);
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = Vec::with_capacity(order.len());
        for &t in order {
            let x = g.slice_rows(seq, t, 1)?;
            h = Self::step(g, &vars, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// GRU-QE and its bidirectional / sum-pooled variants.
#[derive(Clone, Debug)]
pub struct GruEncoder {
    aggregation: Aggregation,
    forward: GruCell,
    backward: Option<GruCell>,
}

impl GruEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        match cfg.variant {
            Variant::Gru => Ok(Self {
                aggregation: cfg.aggregation,
                forward: GruCell::register(store, "enc.gru.fwd", cfg.d_w, cfg.d_q, rng)?,
                backward: None,
            }),
            Variant::BiGru => {
                if cfg.d_q % 2 != 0 {
                    return Err(Error::Config(format!("bigru needs an even d_q, got {}", cfg.d_q)));
                }
                let h = cfg.d_q / 2;
                Ok(Self {
                    aggregation: cfg.aggregation,
                    forward: GruCell::register(store, "enc.gru.fwd", cfg.d_w, h, rng)?,
                    backward: Some(GruCell::register(store, "enc.gru.bwd", cfg.d_w, h, rng)?),
                })
            }
            other => Err(Error::Config(format!("GRU encoder built for variant {other}"))),
        }
    }

    fn read_out(&self, g: &mut Graph<'_>, states: &[Var]) -> Result<Var> {
        match self.aggregation {
            Aggregation::LastHidden => Ok(*states.last().expect("non-empty sequence")),
            Aggregation::SumPool => {
                let stacked = g.concat_rows(states)?;
                Ok(g.sum_pool(stacked))
            }
        }
    }

    /// Encodes an embedded sequence `[n x d_w]` into `[1 x d_q]`.
    pub fn encode_gru(&self, g: &mut Graph<'_>, seq: Var) -> Result<Var> {
        let n = g.value(seq).dims2().0;
        if n == 0 {
            return Err(Error::domain("encode_gru", "empty sequence"));
        }
        let order: Vec<usize> = (0..n).collect();
        let fwd = self.forward.run(g, seq, &order)?;
        let q_fwd = self.read_out(g, &fwd)?;
        match &self.backward {
            None => Ok(q_fwd),
            Some(cell) => {
                let rev: Vec<usize> = (0..n).rev().collect();
                let bwd = cell.run(g, seq, &rev)?;
                let q_bwd = self.read_out(g, &bwd)?;
                g.concat_cols(&[q_fwd, q_bwd])
            }
        }
    }
}
