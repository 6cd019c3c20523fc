//! Static per-step computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates exact derivatives of a scalar
//! output. A tape records one step and is then dropped.

use std::collections::HashMap;

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm_into, Tensor};
use crate::error::{Error, Result};
use crate::imaging::RandomStream;

/// Lower clamp for probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gelu(Var),
    Selu(Var),
    Sigmoid(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SumRows(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Tensor,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Tensor>>>,
    mode: Mode,
    rng: Option<RandomStream>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: None,
            mode,
            rng: None,
        }
    }

    /// Supplies the stream used for dropout masks in training mode.
    pub fn with_rng(mut self, rng: RandomStream) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient can be read back after `backward`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Parameter leaf; repeated calls return the same node. Frozen
    /// parameters do not require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let rg = self.store.is_trainable(id);
        let v = self.push(value, Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims2(a), self.dims2(b));
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(self.value(a), false, self.value(b), false, out.data_mut(), false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims2(a), self.dims2(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(self.value(a), false, self.value(b), true, out.data_mut(), false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.check_same(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, n] + [1, n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bn)) = (self.dims2(x), self.dims2(bias));
        if br != 1 || bn != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.dims2(gamma) != (1, n) || self.dims2(beta) != (1, n) {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut out = Tensor::zeros(&[m, n]);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.data_mut()[r * n + c] = h;
                out.data_mut()[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data_mut()[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - max).exp();
                sum += *ov;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let out = out.reshaped(xv.shape()).expect("same size");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(selu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Selu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            out.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Inverted dropout in training mode; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::GraphState("training-mode dropout needs a random stream".into()))?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Stacks token matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start > end || end > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = Tensor::matrix(end - start, n, self.value(x).data()[start * n..end * n].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut out = Tensor::zeros(&[m, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let c = pv.cols();
            for r in 0..m {
                out.data_mut()[r * total + offset..r * total + offset + c].copy_from_slice(pv.row(r));
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start > end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::matrix(m, w, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[m, n] → [m, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::matrix(xv.rows(), 1, data).expect("rows");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumRows(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean soft-label binary cross-entropy with predictions clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("bce_mean", pv.shape(), target.shape()));
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| bce_term(p, t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    pub fn mse_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("mse_mean", pv.shape(), target.shape()));
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output recorded on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::GraphState("backward called on a variable not recorded on this tape".into()));
        }
        if self.grads.is_some() {
            return Err(Error::GraphState("backward already ran for this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::GraphState(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Adds the gradients of every trainable parameter used on this tape.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) -> Result<()> {
        if self.grads.is_none() {
            return Err(Error::GraphState("parameter gradients requested before backward".into()));
        }
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                grads.accumulate(id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| gemm_into(g, false, bv, true, ga.data_mut(), true));
                acc(*b, &mut |gb| gemm_into(av, true, g, false, gb.data_mut(), true));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| gemm_into(g, false, bv, false, ga.data_mut(), true));
                acc(*b, &mut |gb| gemm_into(g, true, av, false, gb.data_mut(), true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), aa) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| gx.add_assign(g));
                acc(*bias, &mut |gb| {
                    let n = g.cols();
                    for r in 0..g.rows() {
                        for (x, gy) in gb.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |gx| {
                for (a, gy) in gx.data_mut().iter_mut().zip(g.data()) {
                    *a += f * gy;
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let gam = nodes[gamma.0].value.data();
                acc(*gamma, &mut |gg| {
                    for r in 0..m {
                        for c in 0..n {
                            gg.data_mut()[c] += g.data()[r * n + c] * xhat.data()[r * n + c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..m {
                        for c in 0..n {
                            gb.data_mut()[c] += g.data()[r * n + c];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for r in 0..m {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let hr = &xhat.data()[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gam[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        let out = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            let d = gr[c] * gam[c];
                            out[c] += rstd[r] / nf * (nf * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => acc(*x, &mut |gx| {
                let n = out.cols();
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().enumerate() {
                        *o += y[c] * (gy[c] - dot);
                    }
                }
            }),
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((o, gy), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gy * gelu_grad(*v);
                    }
                });
            }
            Op::Selu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((o, gy), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gy * selu_grad(*v);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, gy), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += gy * y * (1.0 - y);
                }
            }),
            Op::L2NormalizeRows { x, norms } => acc(*x, &mut |gx| {
                let n = out.cols();
                for (r, norm) in norms.iter().enumerate() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().enumerate() {
                        *o += (gy[c] - y[c] * dot) / norm;
                    }
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((o, gy), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += gy * m;
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp| {
                        for (o, gy) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *o += gy;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => acc(*x, &mut |gx| {
                let n = g.cols();
                for (o, gy) in gx.data_mut()[start * n..start * n + g.len()].iter_mut().zip(g.data()) {
                    *o += gy;
                }
            }),
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for r in 0..g.rows() {
                            for (o, gy) in gp.data_mut()[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g.data()[r * total + offset..r * total + offset + c])
                            {
                                *o += gy;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => acc(*x, &mut |gx| {
                let (w, n) = (g.cols(), gx.cols());
                for r in 0..g.rows() {
                    for (o, gy) in gx.data_mut()[r * n + start..r * n + start + w]
                        .iter_mut()
                        .zip(&g.data()[r * w..(r + 1) * w])
                    {
                        *o += gy;
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (o, gy) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += gy;
                }
            }),
            Op::SumRows(x) => acc(*x, &mut |gx| {
                let n = gx.cols();
                for r in 0..gx.rows() {
                    let gy = g.data()[r];
                    gx.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|o| *o += gy);
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = g.item() / gx.len() as f64;
                gx.data_mut().iter_mut().for_each(|o| *o += s);
            }),
            Op::Bce { pred, target } => {
                let pv = &nodes[pred.0].value;
                acc(*pred, &mut |gp| {
                    let s = g.item() / pv.len() as f64;
                    for ((o, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *o += s * bce_grad(p, t);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = &nodes[pred.0].value;
                acc(*pred, &mut |gp| {
                    let s = g.item() / pv.len() as f64;
                    for ((o, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *o += s * 2.0 * (p - t);
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// One soft-label cross-entropy term with the probability clamp applied.
pub fn bce_term(p: f64, t: f64) -> f64 {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * c.ln() + (1.0 - t) * (1.0 - c).ln())
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -(t / p - (1.0 - t) / (1.0 - p))
}
