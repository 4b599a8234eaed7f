//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so walking the
//! tape in reverse is a valid topological order and visits each node once.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::normalize::{alpha_gradient, AlphaSpec, Normalizer, NormalizerOutput};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How an attention op picks its normalizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaSource {
    Softmax,
    Fixed(f64),
    /// α = 1 + sigmoid(att_scalar) read from a scalar node.
    Learned(Var),
}

struct AttentionRow {
    active: Vec<usize>,
    output: NormalizerOutput,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Columns {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Attention {
        scores: Var,
        alpha: AlphaSource,
        normalizer: Normalizer,
        rows: Vec<Option<AttentionRow>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Exactly-zero counts over attention weights inside their masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SparsityStats {
    pub zeros: usize,
    pub total: usize,
}

impl SparsityStats {
    pub fn merge(&mut self, other: SparsityStats) {
        self.zeros += other.zeros;
        self.total += other.total;
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zeros as f64 / self.total as f64
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast-adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = self
            .value(x)
            .layer_norm(self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out.output,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: out.normalized,
                inv_std: out.inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).columns(start, len)?;
        Ok(self.push(value, Op::Columns { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row-wise attention normalizer over `scores [r×c]`. Row `i` is
    /// normalized over the columns where `mask.row(i)` is true; every other
    /// entry is exactly 0, and a row with no allowed column is all zero.
    pub fn attention_weights(
        &mut self,
        scores: Var,
        mask: &Mask,
        alpha: AlphaSource,
    ) -> Result<Var> {
        let s = self.value(scores);
        if s.shape().len() != 2 || mask.rows() != s.rows() || mask.cols() != s.cols() {
            return Err(Error::Shape {
                op: "attention_weights",
                left: s.shape().to_vec(),
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let normalizer = match alpha {
            AlphaSource::Softmax => Normalizer::Softmax,
            AlphaSource::Fixed(a) => Normalizer::Entmax(a),
            AlphaSource::Learned(v) => Normalizer::Entmax(
                AlphaSpec::Learned {
                    att_scalar: self.value(v).item(),
                }
                .effective(),
            ),
        };
        let (r, c) = (s.rows(), s.cols());
        let mut out = Tensor::zeros(&[r, c]);
        let mut rows = Vec::with_capacity(r);
        for i in 0..r {
            let active: Vec<usize> = (0..c).filter(|&j| mask.get(i, j)).collect();
            if active.is_empty() {
                rows.push(None);
                continue;
            }
            let srow = s.row(i);
            let z: Vec<f64> = active.iter().map(|&j| srow[j]).collect();
            let output = normalizer.apply(&z)?;
            let orow = out.row_mut(i);
            for (&j, &p) in active.iter().zip(&output.probs) {
                orow[j] = p;
            }
            rows.push(Some(AttentionRow { active, output }));
        }
        let inputs: Vec<Var> = match alpha {
            AlphaSource::Learned(v) => vec![scores, v],
            _ => vec![scores],
        };
        Ok(self.push(
            out,
            Op::Attention {
                scores,
                alpha,
                normalizer,
                rows,
            },
            &inputs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under a softmax over the
    /// `allowed` vocabulary columns. `None` targets are padding and skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        allowed: &[bool],
    ) -> Result<Var> {
        let l = self.value(logits);
        let (n, v) = (l.rows(), l.cols());
        if targets.len() != n || allowed.len() != v {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: l.shape().to_vec(),
                right: vec![targets.len(), allowed.len()],
            });
        }
        let mut probs = Tensor::zeros(&[n, v]);
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v || !allowed[t] {
                return Err(Error::contract(format!(
                    "target id {t} is not an emittable token"
                )));
            }
            let row = l.row(i);
            let log_probs = masked_log_softmax(row, allowed);
            total -= log_probs[t];
            count += 1;
            for (p, lp) in probs.row_mut(i).iter_mut().zip(&log_probs) {
                *p = lp.exp();
            }
        }
        if count == 0 {
            return Err(Error::contract("every target position is padding"));
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sparsity_stats(&self) -> SparsityStats {
        let mut stats = SparsityStats::default();
        for node in &self.nodes {
            if let Op::Attention { rows, .. } = &node.op {
                for row in rows.iter().flatten() {
                    stats.total += row.active.len();
                    stats.zeros += row.output.probs.iter().filter(|&&p| p == 0.0).count();
                }
            }
        }
        stats
    }

    /// Concatenated support patterns of every attention op, used to detect
    /// support changes when finite-differencing through entmax.
    pub fn support_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Attention { rows, .. } = &node.op {
                for row in rows.iter().flatten() {
                    sig.extend_from_slice(&row.output.support);
                }
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone())?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let summed = g.sum_rows();
                    accumulate(grads, *bias, Tensor::new(shape, summed.into_data())?)?;
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.scale(*s))?,
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, Tensor::filled(shape, g.item()))?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gain_v = self.value(*gain);
                let d = g.cols();
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, g.sum_rows().into_data())?)?;
                }
                if self.wants(*gain) {
                    let shape = gain_v.shape().to_vec();
                    let gg = g.mul(normalized)?.sum_rows();
                    accumulate(grads, *gain, Tensor::new(shape, gg.into_data())?)?;
                }
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let grow = g.row(r);
                        let xhat = normalized.row(r);
                        let gxhat: Vec<f64> =
                            grow.iter().zip(gain_v.data()).map(|(a, b)| a * b).collect();
                        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                        let mean_gx =
                            gxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            out[c] = istd * (gxhat[c] - mean_g - xhat[c] * mean_gx);
                        }
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::Gather { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::Columns { x, start } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        accumulate(grads, p, g.columns(offset, width)?)?;
                    }
                    offset += width;
                }
            }
            Op::Attention {
                scores,
                alpha,
                normalizer,
                rows,
            } => {
                let s = self.value(*scores);
                let mut gs = Tensor::zeros(s.shape());
                let mut g_att = 0.0;
                for (i, row) in rows.iter().enumerate() {
                    let Some(row) = row else { continue };
                    let up: Vec<f64> = row.active.iter().map(|&j| g.get(i, j)).collect();
                    let local = normalizer.backward(&row.output, &up);
                    let out = gs.row_mut(i);
                    for (&j, v) in row.active.iter().zip(&local) {
                        out[j] = *v;
                    }
                    if let AlphaSource::Learned(a) = alpha {
                        let z: Vec<f64> = row.active.iter().map(|&j| s.get(i, j)).collect();
                        let spec = AlphaSpec::Learned {
                            att_scalar: self.value(*a).item(),
                        };
                        g_att += alpha_gradient(&z, &spec, &up)?;
                    }
                }
                if self.wants(*scores) {
                    accumulate(grads, *scores, gs)?;
                }
                if let AlphaSource::Learned(a) = alpha {
                    if self.wants(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(grads, *a, Tensor::new(shape, vec![g_att])?)?;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g.item() / *count as f64;
                let mut gl = Tensor::zeros(probs.shape());
                for (i, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let out = gl.row_mut(i);
                    for (o, p) in out.iter_mut().zip(probs.row(i)) {
                        *o = p * scale;
                    }
                    out[t] -= scale;
                }
                accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Log-softmax over the allowed columns; disallowed columns get -inf.
pub fn masked_log_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    let log_z = max + total.ln();
    row.iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { v - log_z } else { f64::NEG_INFINITY })
        .collect()
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
