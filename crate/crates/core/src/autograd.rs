//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{mix64, name_hash, unit_f64};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Seed context for inverted dropout: the mask for a call site is a pure
/// function of `(seed, step, site name)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutCtx {
    pub seed: u64,
    pub step: u64,
}

enum Op {
    Leaf { name: Option<String> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Dropout { x: Var, scale: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad_id: usize, probs: Vec<f64>, count: usize },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    dropout: Option<DropoutCtx>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
    by_var: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var.0)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `dropout` calls are active.
    pub fn with_dropout(ctx: DropoutCtx) -> Self {
        Self {
            nodes: Vec::new(),
            dropout: Some(ctx),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf { .. } => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::AddConst(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum(x) => vec![*x],
        }
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.leaf(value, true, Some(name.to_string()))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool, name: Option<String>) -> Result<Var> {
        let v = self.push(value, Op::Leaf { name }, "leaf")?;
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    /// `a: m×k`, `b: k×n` → `m×n`. Higher-rank `a` is treated as a stack of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() {
            return shape_err(format!("matmul expects rank-2 rhs, got {sa:?} x {sb:?}"));
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let m = self.value(a).len() / k;
        let n = sb[1];
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// Batched matmul over rank-3 tensors: `[B, m, k] · [B, k, n]`, or
    /// `[B, m, k] · [B, n, k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm shape mismatch: {sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return shape_err(format!("bmm inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for t in 0..batch {
            let at = &da[t * m * k..(t + 1) * m * k];
            let bt = &db[t * k * n..(t + 1) * k * n];
            let c = if transpose_b {
                kernels::matmul_nt(at, bt, m, k, n)
            } else {
                kernels::matmul(at, bt, m, k, n)
            };
            out.extend_from_slice(&c);
        }
        let op = Op::BatchMatMul { a, b, batch, m, k, n, transpose_b };
        self.push(Tensor::new(vec![batch, m, n], out)?, op, "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    /// Adds a vector along the trailing dimension (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).len() != d {
            return shape_err(format!("add_row: row of {} for last dim {d}", self.value(row).len()));
        }
        let r = self.data(row);
        let out: Vec<f64> = self.data(x).chunks(d).flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddRow { x, row }, "add_row")
    }

    /// Adds a constant tensor of the same shape (masks, positional encodings).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("add_const shape mismatch: {:?} vs {:?}", self.shape(x), c.shape()));
        }
        let out: Vec<f64> = self.data(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddConst(x), "add_const")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(x), "relu")
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (src[idx(j)] - max).exp();
                    sum += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[idx(j)] = b / sum;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, "softmax")
    }

    /// Layer normalisation over the trailing dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(format!("layer_norm: gain/bias must have length {d}"));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut normed = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let nv = (row[j] - mean) * is;
                normed[r * d + j] = nv;
                out[r * d + j] = nv * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm { x, gain, bias, normed, inv_std };
        self.push(Tensor::new(shape, out)?, op, "layer_norm")
    }

    /// Row lookup: `table: V×d`, returns `ids.len() × d`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err(format!("gather expects a rank-2 table, got {ts:?}"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary {v}")));
        }
        if ids.is_empty() {
            return shape_err("gather with no ids".into());
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Gather { table, ids: ids.to_vec() };
        self.push(Tensor::new(vec![ids.len(), d], out)?, op, "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.data(x), &shape, axes);
        let op = Op::Permute { x, axes: axes.to_vec() };
        self.push(Tensor::new(out_shape, out)?, op, "permute")
    }

    /// Inverted dropout. Identity when the graph has no dropout context or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, site: &str) -> Result<Var> {
        let Some(ctx) = self.dropout else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let key = mix64(mix64(ctx.seed ^ mix64(ctx.step)) ^ name_hash(site));
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| if unit_f64(mix64(key.wrapping_add(i))) >= p { keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { x, scale }, "dropout")
    }

    /// Mean token-level negative log-likelihood over positions whose target is
    /// not `pad_id`. `logits` has trailing dimension = vocabulary size and one
    /// row per target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let vocab = self.value(logits).last_dim();
        let rows = self.value(logits).len() / vocab;
        if rows != targets.len() {
            return shape_err(format!("cross_entropy: {rows} logit rows for {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {bad} out of range for vocabulary {vocab}")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= sum;
            }
            if t != pad_id {
                total += max + sum.ln() - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), pad_id, probs, count };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (idx, slot) in grads.into_iter().enumerate() {
            let (Some(g), Op::Leaf { name }) = (slot, &self.nodes[idx].op) else { continue };
            let t = Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?;
            if let Some(name) = name {
                out.by_name.insert(name.clone(), t.clone());
            }
            out.by_var.insert(idx, t);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc(*a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                acc(*b, kernels::matmul_tn(self.data(*a), g, m, k, n));
            }
            Op::BatchMatMul { a, b, batch, m, k, n, transpose_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = Vec::with_capacity(batch * m * k);
                let mut gb = Vec::with_capacity(batch * k * n);
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &da[t * m * k..(t + 1) * m * k];
                    let bt = &db[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        // C = A·Bᵀ with B: n×k ⇒ dA = dC·B, dB = dCᵀ·A
                        ga.extend(kernels::matmul(gt, bt, m, n, k));
                        gb.extend(kernels::matmul_tn(gt, at, m, n, k));
                    } else {
                        ga.extend(kernels::matmul_nt(gt, bt, m, n, k));
                        gb.extend(kernels::matmul_tn(at, gt, m, k, n));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow { x, row } => {
                let d = self.value(*row).len();
                let mut gr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                acc(*x, g.to_vec());
                acc(*row, gr);
            }
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Relu(x) => {
                let dx = g.iter().zip(self.data(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let d = self.value(*gain).len();
                let gn = self.data(*gain);
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                let mut dn = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let nr = &normed[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgain[j] += gr[j] * nr[j];
                        dbias[j] += gr[j];
                        dn[j] = gr[j] * gn[j];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / d as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                acc(*table, dt);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, permute_data(g, node.value.shape(), &inverse));
            }
            Op::Dropout { x, scale } => acc(*x, g.iter().zip(scale).map(|(g, s)| g * s).collect()),
            Op::CrossEntropy { logits, targets, pad_id, probs, count } => {
                let vocab = self.value(*logits).last_dim();
                let w = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *d = w * p;
                    }
                    row[t] -= w;
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let (inner, inner_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut index = vec![0usize; rank - 1];
    for _ in 0..src.len() / inner {
        let base: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = g.input(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
        let col = g.input(t(&[2, 1], &[5., 7.])).unwrap();
        let c = g.matmul(i, col).unwrap();
        assert_eq!(g.value(c).data(), &[5., 7.]);
        let ones = g.input(t(&[2, 1], &[1., 1.])).unwrap();
        let c = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0., 0., 0.])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(t(&[2], &[1000., 0.])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1].abs() < 1e-12);
        let x = g.input(t(&[2], &[1., 2.])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((g.value(y).data()[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((g.value(y).data()[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[0., 5., 0., 5.])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.input(t(&[4], &[1.; 4])).unwrap();
        let zero = g.input(t(&[4], &[0.; 4])).unwrap();
        let x = g.input(t(&[4], &[3.; 4])).unwrap();
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let one = g.input(t(&[2], &[1., 1.])).unwrap();
        let zero = g.input(t(&[2], &[0., 0.])).unwrap();
        let x = g.input(t(&[2], &[1., -1.])).unwrap();
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);

        let gain = g.input(t(&[2], &[3., 3.])).unwrap();
        let bias = g.input(t(&[2], &[1., 1.])).unwrap();
        let x = g.input(t(&[2], &[2., 4.])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 2.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let v = 7;
        let logits = g.input(Tensor::full(&[1, 2, v], 0.3)).unwrap();
        let l = g.cross_entropy(logits, &[3, 5], 0).unwrap();
        assert!((g.value(l).data()[0] - (v as f64).ln()).abs() < 1e-12);

        let logits = g.input(t(&[1, 3], &[0., 800., 0.])).unwrap();
        let l = g.cross_entropy(logits, &[1], 0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        let logits = g.input(t(&[1, 2], &[0., 3f64.ln()])).unwrap();
        let l = g.cross_entropy(logits, &[1], 5).unwrap();
        assert!((g.value(l).data()[0] - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_pad_is_error() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.cross_entropy(logits, &[0, 0], 0), Err(Error::EmptyLoss)));
        assert!(matches!(g.cross_entropy(logits, &[0, 3], 0), Err(Error::Input(_))));
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let xx = g.mul(x, x).unwrap();
        let half = g.scale(xx, 0.5).unwrap();
        let s = g.sum(half).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::zeros(&[2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.input(t(&[2, 3, 4], &data)).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let ctx = DropoutCtx { seed: 7, step: 3 };
        let run = |site: &str| {
            let mut g = Graph::with_dropout(ctx);
            let x = g.input(Tensor::full(&[1000], 1.0)).unwrap();
            let y = g.dropout(x, 0.25, site).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run("enc.0.ffn");
        assert_eq!(a, run("enc.0.ffn"));
        assert_ne!(a, run("enc.1.ffn"));
        let kept = a.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
        assert!(a.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));

        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.5, "s").unwrap(), x);
    }
}
