//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node ids are already in topological order and the backward pass is a
//! single reverse sweep. Parameter leaves borrow their values from a
//! [`ParameterStore`] instead of copying them.

use super::params::{ParamId, ParameterStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, sigmoid, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    SumAll(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    OuterAdd(Var, Var),
    LayerNormRows(Var, Vec<f64>),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        window: usize,
    },
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; build one per forward pass.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParameterStore>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
        }
    }

    pub fn with_params(store: &'p ParameterStore) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            store: Some(store),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter leaf without a store")
                .value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf bound to a parameter of the attached store.
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let id = store.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims(ta);
        let (k2, m) = dims(tb);
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(ta.data(), tb.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?, rg))
    }

    /// `x[n x m] + b[m]` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, m) = dims(tx);
        if tb.len() != m {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for (o, bv) in out[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let shape = tx.shape().to_vec();
        Ok(self.push(Op::AddBias(x, b), Tensor::new(shape, out)?, rg))
    }

    /// `y = xW (+ b)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || dims(ta) != dims(tb) {
            return Err(Error::shape(op_name, ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::new(shape, out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[n x m] * g[m]` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (n, m) = dims(tx);
        if tg.len() != m {
            return Err(Error::shape("mul_row", tx.shape(), tg.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for (o, gv) in out[i * m..(i + 1) * m].iter_mut().zip(tg.data()) {
                *o *= gv;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        let shape = tx.shape().to_vec();
        Ok(self.push(Op::MulRow(x, g), Tensor::new(shape, out)?, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| f(*v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(op, Tensor::new(shape, out).expect("same shape"), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::domain("leaky_relu", format!("slope {slope} not in (0,1)")));
        }
        Ok(self.map(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over each row (the whole vector for 1-D input).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (n, m) = dims(tx);
        let mut out = tx.data().to_vec();
        for i in 0..n {
            softmax_in_place(&mut out[i * m..(i + 1) * m]);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxRows(x), Tensor::new(shape, out)?, rg))
    }

    /// Sum over rows: `[n x d] -> [1 x d]`.
    pub fn sum_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&tx.data()[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Op::SumRows(x), Tensor::new(vec![1, m], out).unwrap(), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = tx.data()[i * m + j];
            }
        }
        let rg = self.rg(x);
        self.push(Op::Transpose(x), Tensor::new(vec![m, n], out).unwrap(), rg)
    }

    /// Row gather: output row `r` is row `rows[r]` of `x`.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        if rows.is_empty() {
            return Err(Error::domain("gather", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::Lookup { id: r, limit: n });
            }
            out.extend_from_slice(&tx.data()[r * m..(r + 1) * m]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::Gather(x, rows.to_vec()),
            Tensor::new(vec![rows.len(), m], out)?,
            rg,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        if len == 0 || start + len > m {
            return Err(Error::domain("slice_cols", format!("{start}+{len} > {m}")));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&tx.data()[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols(x, start), Tensor::new(vec![n, len], out)?, rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        if len == 0 || start + len > n {
            return Err(Error::domain("slice_rows", format!("{start}+{len} > {n}")));
        }
        let out = tx.data()[start * m..(start + len) * m].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows(x, start), Tensor::new(vec![len, m], out)?, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat_cols", "nothing to concatenate"));
        }
        let n = dims(self.value(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = dims(self.value(p));
            if pn != n {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![n, total], out)?, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat_rows", "nothing to concatenate"));
        }
        let m = dims(self.value(parts[0])).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            let (pn, pm) = dims(t);
            if pm != m {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
            n += pn;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![n, m], out)?, rg))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a[n x 1]`, `b[m x 1]`
    /// (1-D inputs accepted).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.len(), tb.len());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ta.data()[i] + tb.data()[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::OuterAdd(a, b), Tensor::new(vec![n, m], out).unwrap(), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (n, m) = dims(tx);
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        let shape = tx.shape().to_vec();
        self.push(Op::LayerNormRows(x, inv_std), Tensor::new(shape, out).unwrap(), rg)
    }

    /// Length-preserving 1-D convolution over a sequence `[n x d_in]` with
    /// kernel `[s x d_in x d_out]` and bias `[d_out]`. The sequence is padded
    /// with `s - 1` zero rows on the right, so
    /// `out[i] = sum_t input[i + t] * kernel[t] + bias`.
    pub fn conv1d_seq(&mut self, input: Var, kernel: Var, bias: Var, window: usize) -> Result<Var> {
        if window < 1 {
            return Err(Error::domain("conv1d_seq", "window must be >= 1"));
        }
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (n, d_in) = dims(ti);
        let ks = tk.shape();
        if ks.len() != 3 || ks[0] != window || ks[1] != d_in {
            return Err(Error::shape("conv1d_seq", &[window, d_in], ks));
        }
        let d_out = ks[2];
        if tb.len() != d_out {
            return Err(Error::shape("conv1d_seq", &[d_out], tb.shape()));
        }
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            out[i * d_out..(i + 1) * d_out].copy_from_slice(tb.data());
            for t in 0..window.min(n - i) {
                let src = &ti.data()[(i + t) * d_in..(i + t + 1) * d_in];
                let k = &tk.data()[t * d_in * d_out..(t + 1) * d_in * d_out];
                gemm_nn(src, k, &mut out[i * d_out..(i + 1) * d_out], 1, d_in, d_out);
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                bias,
                window,
            },
            Tensor::new(vec![n, d_out], out)?,
            rg,
        ))
    }

    /// Mean over entries of the stable binary cross-entropy
    /// `max(z,0) - z t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let tz = self.value(logits);
        if tz.len() != target.len() {
            return Err(Error::shape("bce_with_logits", tz.shape(), &[target.len()]));
        }
        if let Some(t) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain("bce_with_logits", format!("target {t} outside [0,1]")));
        }
        let n = target.len() as f64;
        let loss: f64 = tz
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(Op::BceWithLogits(logits, target.to_vec()), Tensor::scalar(loss), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    let shape = self.value(v).shape().to_vec();
                    *slot = Some(delta.reshape(shape).expect("gradient shape"));
                }
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).unwrap();

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = dims(ta);
                let m = dims(tb).1;
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(g.data(), tb.data(), &mut da, n, m, k);
                    acc(*a, like(*a, da), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(ta.data(), g.data(), &mut db, n, k, m);
                    acc(*b, like(*b, db), grads);
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone(), grads);
                if self.rg(*b) {
                    let (n, m) = dims(g);
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (d, v) in db.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                            *d += v;
                        }
                    }
                    acc(*b, like(*b, db), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                if self.rg(*b) {
                    acc(*b, like(*b, g.data().iter().map(|v| -v).collect()), grads);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(*a, like(*a, d), grads);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::MulRow(x, gamma) => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (n, m) = dims(tx);
                if self.rg(*x) {
                    let mut dx = g.data().to_vec();
                    for i in 0..n {
                        for (d, s) in dx[i * m..(i + 1) * m].iter_mut().zip(tg.data()) {
                            *d *= s;
                        }
                    }
                    acc(*x, like(*x, dx), grads);
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += g.data()[i * m + j] * tx.data()[i * m + j];
                        }
                    }
                    acc(*gamma, like(*gamma, dg), grads);
                }
            }
            Op::Scale(x, c) => {
                acc(*x, like(*x, g.data().iter().map(|v| v * c).collect()), grads);
            }
            Op::AddScalar(x) => acc(*x, g.clone(), grads),
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv >= 0.0 { *gv } else { gv * slope })
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::SoftmaxRows(x) => {
                let (n, m) = dims(out);
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let y = &out.data()[i * m..(i + 1) * m];
                    let gy = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        d[i * m + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::SumRows(x) => {
                let (n, m) = dims(self.value(*x));
                let mut d = Vec::with_capacity(n * m);
                for _ in 0..n {
                    d.extend_from_slice(g.data());
                }
                acc(*x, like(*x, d), grads);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                acc(*x, like(*x, vec![g.data()[0]; n]), grads);
            }
            Op::Transpose(x) => {
                let (n, m) = dims(self.value(*x));
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] = g.data()[j * n + i];
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::Gather(x, rows) => {
                let (n, m) = dims(self.value(*x));
                let mut d = vec![0.0; n * m];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..m {
                        d[src * m + j] += g.data()[r * m + j];
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::SliceCols(x, start) => {
                let (n, m) = dims(self.value(*x));
                let w = dims(g).1;
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, like(*x, d), grads);
            }
            Op::SliceRows(x, start) => {
                let (n, m) = dims(self.value(*x));
                let mut d = vec![0.0; n * m];
                d[start * m..start * m + g.len()].copy_from_slice(g.data());
                acc(*x, like(*x, d), grads);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = dims(g);
                let mut offset = 0;
                for &p in parts {
                    let w = dims(self.value(p)).1;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, like(p, d), grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        acc(p, like(p, g.data()[offset..offset + len].to_vec()), grads);
                    }
                    offset += len;
                }
            }
            Op::OuterAdd(a, b) => {
                let (n, m) = dims(out);
                if self.rg(*a) {
                    let d = (0..n).map(|i| g.data()[i * m..(i + 1) * m].iter().sum()).collect();
                    acc(*a, like(*a, d), grads);
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            d[j] += g.data()[i * m + j];
                        }
                    }
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::LayerNormRows(x, inv_std) => {
                let (n, m) = dims(out);
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let xhat = &out.data()[i * m..(i + 1) * m];
                    let gy = &g.data()[i * m..(i + 1) * m];
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    let mf = m as f64;
                    for j in 0..m {
                        d[i * m + j] = inv_std[i] / mf * (mf * gy[j] - sum_g - xhat[j] * sum_gx);
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                window,
            } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let (n, d_in) = dims(ti);
                let d_out = tk.shape()[2];
                if self.rg(*input) {
                    let mut d = vec![0.0; n * d_in];
                    for i in 0..n {
                        let gi = &g.data()[i * d_out..(i + 1) * d_out];
                        for t in 0..(*window).min(n - i) {
                            let k = &tk.data()[t * d_in * d_out..(t + 1) * d_in * d_out];
                            gemm_nt(gi, k, &mut d[(i + t) * d_in..(i + t + 1) * d_in], 1, d_out, d_in);
                        }
                    }
                    acc(*input, like(*input, d), grads);
                }
                if self.rg(*kernel) {
                    let mut d = vec![0.0; tk.len()];
                    for i in 0..n {
                        let gi = &g.data()[i * d_out..(i + 1) * d_out];
                        for t in 0..(*window).min(n - i) {
                            let src = &ti.data()[(i + t) * d_in..(i + t + 1) * d_in];
                            gemm_tn(
                                src,
                                gi,
                                &mut d[t * d_in * d_out..(t + 1) * d_in * d_out],
                                1,
                                d_in,
                                d_out,
                            );
                        }
                    }
                    acc(*kernel, like(*kernel, d), grads);
                }
                if self.rg(*bias) {
                    let mut d = vec![0.0; d_out];
                    for i in 0..n {
                        for (dv, gv) in d.iter_mut().zip(&g.data()[i * d_out..(i + 1) * d_out]) {
                            *dv += gv;
                        }
                    }
                    acc(*bias, like(*bias, d), grads);
                }
            }
            Op::BceWithLogits(z, target) => {
                let tz = self.value(*z);
                let scale = g.data()[0] / target.len() as f64;
                let d = tz
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&zv, &t)| (sigmoid(zv) - t) * scale)
                    .collect();
                acc(*z, like(*z, d), grads);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` did not influence the loss.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        match &self.by_node[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.shape(v)),
        }
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }

    /// Summed gradient per parameter id (a parameter may appear on several leaves).
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (id, g) in &self.params {
            match out.iter_mut().find(|(i, _)| i == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((*id, g.clone())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]));
        let s = g.softmax_rows(v).unwrap();
        let total = g.sum_all(s);
        let grads = g.backward(total).unwrap();
        for d in grads.wrt(&g, v).data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::Domain { .. })));
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![5.0]));
        let s = g.sum_all(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, b).data(), &[0.0]);
        assert_eq!(grads.wrt(&g, a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::identity(2));
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.affine(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::full(&[3, 2], 0.7));
        let b = g.constant(Tensor::vector(vec![5.0, 6.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.affine(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1.0, 0.0]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -0.2, 0.0]);
        assert!(g.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn conv_rejects_zero_window() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[3, 2]));
        let k = g.constant(Tensor::zeros(&[1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.conv1d_seq(s, k, b, 0).is_err());
    }

    #[test]
    fn bce_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(g.bce_with_logits(z, &[0.5, 1.2]).is_err());
    }
}
