//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape. A node only
//! keeps what its backward rule needs when at least one input requires a
//! gradient; otherwise it is stored as a constant. [`Graph::backward`]
//! consumes the tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{GradBuffer, ParamId, ParameterStore};
use super::Tensor;

/// Storage precision of node values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    #[default]
    F64,
    /// Values are rounded to `f32` after every op; gradients stay `f64`.
    F32,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Vec<f64>>),
    Gelu(Var),
    Softmax(Var),
    MaskedFill(Var, Arc<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        table: Var,
        index: Arc<Vec<u32>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves of a consumed graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    width: FloatWidth,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph on which parameters are treated as constants.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn with_width(mut self, width: FloatWidth) -> Self {
        self.width = width;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shared_value(&self, var: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[var.0].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.width == FloatWidth::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds an input tensor.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a shared constant without copying it.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Adds a parameter; it requires grad unless this is an inference graph.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let rg = !self.no_grad;
        self.push_shared(store.shared(id), Op::Param(id), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            1.0,
            (self.value(a).data(), 0, k, 1),
            (self.value(b).data(), 0, n, 1),
            0.0,
            (&mut out, 0, n, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).numel() != n {
            return Err(mismatch("add_row", self.shape(x), self.shape(b)));
        }
        let vb = self.value(b).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Arc<Vec<f64>>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.numel() {
            return Err(mismatch("mul_const", vx.shape(), &[factors.len()]));
        }
        let data = vx.data().iter().zip(factors.iter()).map(|(x, f)| x * f).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, factors), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis; `-inf` entries get probability exactly 0.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row, None);
        }
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>, value: f64) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(mismatch("masked_fill", vx.shape(), &[mask.len()]));
        }
        let data = vx
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskedFill(x, mask), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != n || vb.numel() != n {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.leading();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
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

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 || ids.is_empty() {
            return Err(mismatch("embedding", vt.shape(), &[ids.len()]));
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers per-head bias values: `table` is `[heads, buckets]`, `index`
    /// holds `rows * cols` bucket ids (`u32::MAX` contributes 0). Output is
    /// `[heads, rows, cols]`.
    pub fn gather(&mut self, table: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 || index.len() != rows * cols {
            return Err(mismatch("gather", vt.shape(), &[rows, cols]));
        }
        let (heads, buckets) = (vt.shape()[0], vt.shape()[1]);
        let mut out = vec![0.0; heads * index.len()];
        for h in 0..heads {
            let trow = vt.row(h);
            let orow = &mut out[h * index.len()..(h + 1) * index.len()];
            for (o, &ix) in orow.iter_mut().zip(index.iter()) {
                if ix != u32::MAX {
                    let ix = ix as usize;
                    if ix >= buckets {
                        return Err(Error::Layout(format!("bias bucket {ix} outside table of {buckets}")));
                    }
                    *o = trow[ix];
                }
            }
        }
        let t = Tensor::new(vec![heads, rows, cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Gather { table, index }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq, d]`, `k` and `v` are `[tk, d]`. `bias` (`[heads, tq, tk]`)
    /// is added to the scaled scores; `visible` (`tq * tk`, row-major) hides
    /// keys from queries. A query with no visible key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<Var>,
        visible: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(mismatch("attention", sq, sk));
        }
        let (tq, tk, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} not divisible into {heads} heads")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [heads, tq, tk] {
                return Err(mismatch("attention bias", self.shape(b), &[heads, tq, tk]));
            }
        }
        if let Some(m) = visible {
            if m.len() != tq * tk {
                return Err(mismatch("attention mask", &[tq, tk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let vb = bias.map(|b| self.value(b).data());
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                (tq, dh, tk),
                scale,
                (vq, h * dh, d, 1),
                (vk, h * dh, 1, d),
                0.0,
                (p, 0, tk, 1),
            );
            if let Some(vb) = vb {
                for (s, b) in p.iter_mut().zip(&vb[h * tq * tk..(h + 1) * tq * tk]) {
                    *s += b;
                }
            }
            for (i, row) in p.chunks_mut(tk).enumerate() {
                softmax_in_place(row, visible.map(|m| &m[i * tk..(i + 1) * tk]));
            }
            gemm(
                (tq, tk, dh),
                1.0,
                (p, 0, tk, 1),
                (vv, h * dh, d, 1),
                0.0,
                (&mut out, h * dh, d, 1),
            );
        }
        let t = Tensor::new(vec![tq, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Weighted, label-smoothed cross-entropy summed over rows:
    /// `sum_p weights[p] * CE(logits[p], targets[p])`.
    ///
    /// Classes whose logit is `-inf` are excluded from the distribution and
    /// from the smoothing mass.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64], smoothing: f64) -> Result<Var> {
        let vl = self.value(logits);
        let v = vl.last_dim();
        let rows = vl.leading();
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = vl.row(r);
            let t = targets[r];
            if t >= v {
                return Err(Error::UnknownToken { id: t, vocab: v });
            }
            if row[t] == f64::NEG_INFINITY {
                return Err(Error::Layout(format!("cross_entropy target {t} is masked in row {r}")));
            }
            let allowed = row.iter().filter(|x| x.is_finite()).count() as f64;
            let max = row.iter().copied().filter(|x| x.is_finite()).fold(f64::MIN, f64::max);
            let lse = max
                + row
                    .iter()
                    .filter(|x| x.is_finite())
                    .map(|x| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            let mut smooth_sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if x.is_finite() {
                    let lp = x - lse;
                    probs[r * v + c] = lp.exp();
                    smooth_sum += lp;
                }
            }
            let loss = -((1.0 - smoothing) * (row[t] - lse) + smoothing / allowed * smooth_sum);
            total += weights[r] * loss;
        }
        let rg = self.rg(&[logits]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.numel() != target.len() {
            return Err(mismatch("mse", vp.shape(), &[target.len()]));
        }
        let loss = vp
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / target.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks rows (along the leading axis of a 2-D tensor).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= vx.shape()[0]) {
            return Err(mismatch("select_rows", vx.shape(), &[rows.len()]));
        }
        let n = vx.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(vx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Back-propagates from a scalar `root`, adding parameter gradients into
    /// `sink` and returning the gradients of every other node that requires
    /// one. The tape is consumed.
    pub fn backward(self, root: Var, sink: &mut GradBuffer) -> Result<Gradients> {
        let rootv = &self.nodes[root.0];
        if !rootv.value.is_scalar() {
            return Err(Error::NonScalarRoot(rootv.value.shape().to_vec()));
        }
        if !rootv.requires_grad {
            return Err(Error::RootWithoutGrad);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    sink.accumulate(*id, &g);
                    continue;
                }
                _ => {}
            }
            let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[var.0].requires_grad {
                    return;
                }
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.numel()]);
                f(slot);
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    acc(*a, &mut |da| {
                        gemm((m, n, k), 1.0, (&g, 0, n, 1), (val(*b), 0, 1, n), 1.0, (da, 0, k, 1))
                    });
                    acc(*b, &mut |db| {
                        gemm((k, m, n), 1.0, (val(*a), 0, 1, k), (&g, 0, n, 1), 1.0, (db, 0, n, 1))
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |da| add_into(da, &g));
                    acc(*b, &mut |db| add_into(db, &g));
                }
                Op::AddRow(x, b) => {
                    acc(*x, &mut |dx| add_into(dx, &g));
                    acc(*b, &mut |db| {
                        let n = db.len();
                        for row in g.chunks(n) {
                            add_into(db, row);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    acc(*a, &mut |da| {
                        for ((d, g), y) in da.iter_mut().zip(&g).zip(val(*b)) {
                            *d += g * y;
                        }
                    });
                    acc(*b, &mut |db| {
                        for ((d, g), x) in db.iter_mut().zip(&g).zip(val(*a)) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |dx| {
                    for (d, g) in dx.iter_mut().zip(&g) {
                        *d += g * c;
                    }
                }),
                Op::MulConst(x, f) => acc(*x, &mut |dx| {
                    for ((d, g), f) in dx.iter_mut().zip(&g).zip(f.iter()) {
                        *d += g * f;
                    }
                }),
                Op::Gelu(x) => acc(*x, &mut |dx| {
                    for ((d, g), &v) in dx.iter_mut().zip(&g).zip(val(*x)) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }),
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    acc(*x, &mut |dx| {
                        for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dxr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::MaskedFill(x, mask) => acc(*x, &mut |dx| {
                    for ((d, g), &m) in dx.iter_mut().zip(&g).zip(mask.iter()) {
                        if !m {
                            *d += g;
                        }
                    }
                }),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = node.value.last_dim();
                    let vg = val(*gamma);
                    acc(*gamma, &mut |dg| {
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*beta, &mut |db| {
                        for gr in g.chunks(n) {
                            add_into(db, gr);
                        }
                    });
                    acc(*x, &mut |dx| {
                        for (r, ((dxr, gr), hr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let dh = gr[j] * vg[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for j in 0..n {
                                let dh = gr[j] * vg[j];
                                dxr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = node.value.last_dim();
                    acc(*table, &mut |dt| {
                        for (gr, &id) in g.chunks(d).zip(ids) {
                            add_into(&mut dt[id * d..(id + 1) * d], gr);
                        }
                    });
                }
                Op::Gather { table, index } => {
                    let buckets = nodes[table.0].value.shape()[1];
                    let l = index.len();
                    acc(*table, &mut |dt| {
                        for (h, gh) in g.chunks(l).enumerate() {
                            let row = &mut dt[h * buckets..(h + 1) * buckets];
                            for (gv, &ix) in gh.iter().zip(index.iter()) {
                                if ix != u32::MAX {
                                    row[ix as usize] += gv;
                                }
                            }
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    heads,
                    probs,
                } => {
                    let (tq, d) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
                    let tk = nodes[k.0].value.shape()[0];
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut ds_all = vec![0.0; heads * tq * tk];
                    let mut dv_all = vec![0.0; tk * d];
                    let mut dp = vec![0.0; tq * tk];
                    for h in 0..*heads {
                        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                        gemm(
                            (tq, dh, tk),
                            1.0,
                            (&g, h * dh, d, 1),
                            (val(*v), h * dh, 1, d),
                            0.0,
                            (&mut dp, 0, tk, 1),
                        );
                        gemm(
                            (tk, tq, dh),
                            1.0,
                            (p, 0, 1, tk),
                            (&g, h * dh, d, 1),
                            1.0,
                            (&mut dv_all, h * dh, d, 1),
                        );
                        let ds = &mut ds_all[h * tq * tk..(h + 1) * tq * tk];
                        for i in 0..tq {
                            let pr = &p[i * tk..(i + 1) * tk];
                            let dpr = &dp[i * tk..(i + 1) * tk];
                            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for j in 0..tk {
                                ds[i * tk + j] = pr[j] * (dpr[j] - dot);
                            }
                        }
                    }
                    acc(*v, &mut |dv| add_into(dv, &dv_all));
                    if let Some(b) = bias {
                        acc(*b, &mut |db| add_into(db, &ds_all));
                    }
                    acc(*q, &mut |dq| {
                        for h in 0..*heads {
                            let ds = &ds_all[h * tq * tk..(h + 1) * tq * tk];
                            gemm(
                                (tq, tk, dh),
                                scale,
                                (ds, 0, tk, 1),
                                (val(*k), h * dh, d, 1),
                                1.0,
                                (dq, h * dh, d, 1),
                            );
                        }
                    });
                    acc(*k, &mut |dk| {
                        for h in 0..*heads {
                            let ds = &ds_all[h * tq * tk..(h + 1) * tq * tk];
                            gemm(
                                (tk, tq, dh),
                                scale,
                                (ds, 0, 1, tk),
                                (val(*q), h * dh, d, 1),
                                1.0,
                                (dk, h * dh, d, 1),
                            );
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    smoothing,
                    probs,
                } => {
                    let lv = &nodes[logits.0].value;
                    let v = lv.last_dim();
                    let g0 = g[0];
                    acc(*logits, &mut |dl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = lv.row(r);
                            let allowed = row.iter().filter(|x| x.is_finite()).count() as f64;
                            let w = g0 * weights[r];
                            for c in 0..v {
                                if row[c].is_finite() {
                                    let mut q = smoothing / allowed;
                                    if c == t {
                                        q += 1.0 - smoothing;
                                    }
                                    dl[r * v + c] += w * (probs[r * v + c] - q);
                                }
                            }
                        }
                    });
                }
                Op::Mse { pred, target } => {
                    let n = target.len() as f64;
                    acc(*pred, &mut |dp| {
                        for ((d, p), t) in dp.iter_mut().zip(val(*pred)).zip(target) {
                            *d += g[0] * 2.0 * (p - t) / n;
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::Mean(x) => acc(*x, &mut |dx| {
                    let n = dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }),
                Op::SelectRows { x, rows } => {
                    let n = node.value.last_dim();
                    acc(*x, &mut |dx| {
                        for (gr, &r) in g.chunks(n).zip(rows) {
                            add_into(&mut dx[r * n..(r + 1) * n], gr);
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row. Hidden entries (and `-inf`
/// scores) get exactly 0; a row with nothing visible becomes all zeros.
pub(crate) fn softmax_in_place(row: &mut [f64], visible: Option<&[bool]>) {
    let vis = |j: usize| visible.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if vis(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if vis(j) && *x != f64::NEG_INFINITY {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

type MatRef<'a> = (&'a [f64], usize, usize, usize);
type MatMut<'a> = (&'a mut [f64], usize, usize, usize);

/// `C = alpha * A B + beta * C` on strided views `(data, offset, row_stride, col_stride)`.
fn gemm((m, k, n): (usize, usize, usize), alpha: f64, a: MatRef, b: MatRef, beta: f64, c: MatMut) {
    let last = |(off, rs, cs): (usize, usize, usize), r: usize, cc: usize| {
        off + (r.saturating_sub(1)) * rs + (cc.saturating_sub(1)) * cs
    };
    assert!(m > 0 && k > 0 && n > 0);
    assert!(last((a.1, a.2, a.3), m, k) < a.0.len(), "gemm: A out of bounds");
    assert!(last((b.1, b.2, b.3), k, n) < b.0.len(), "gemm: B out of bounds");
    assert!(last((c.1, c.2, c.3), m, n) < c.0.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            c.3 as isize,
        );
    }
}
