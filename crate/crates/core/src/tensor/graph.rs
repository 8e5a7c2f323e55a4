use std::fmt;

use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    AddBias,
    Scale,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    Attention,
    GatherRows,
    ZeroRows,
    Mse,
    CrossEntropy,
    WeightedSum,
    Sum,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One block of a block-diagonal attention: query rows
/// `q_start..q_start+q_len` attend to key rows `k_start..k_start+k_len` and
/// mix value rows `v_start..v_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub v_start: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Gelu { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows { x: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttentionSegment>,
        probs: Vec<f64>,
    },
    GatherRows {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    ZeroRows { x: Var, rows: Vec<usize> },
    Mse { pred: Var, target: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum { terms: Vec<(Var, f64)> },
    Sum { x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ZeroRows { .. } => OpKind::ZeroRows,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`, so a graph holding
    /// bound parameters can be reused across batches. Vars past `len`
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value into a new constant node; no gradient flows
    /// back through the copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts_unchecked(node.value.shape().to_vec(), g.clone()))
    }

    /// Attention probabilities saved by an attention node, laid out as
    /// segment-major, then head, then query row, then key column.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Test hook: scales every gradient emitted by ops of `kind` during
    /// backward, so the checker can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts_unchecked(shape, data), requires_grad, op))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_nn(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push_op("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let out = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push_op("add", shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let out = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push_op("mul", shape, out, &[a, b], Op::Mul { a, b })
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).values();
        let out: Vec<f64> = self
            .value(x)
            .values()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("add_bias", shape, out, &[x, bias], Op::AddBias { x, bias })
    }

    /// `x · weight + bias`, the affine map used by every projection.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).values().iter().map(|v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("scale", shape, out, &[x], Op::Scale { x, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("gelu", shape, out, &[x], Op::Gelu { x })
    }

    /// Standardizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims(x);
        if self.value(gain).len() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xs = self.value(x).values();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op(
            "layer_norm",
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op("softmax_rows", shape, out, &[x], Op::SoftmaxRows { x })
    }

    /// Block-diagonal multi-head scaled dot-product attention.
    ///
    /// Each head scores with `1/sqrt(d_head)`. Query rows not covered by any
    /// segment produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttentionSegment],
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if dk != d {
            return Err(self.shape_err("attention", q, k));
        }
        if dv != d {
            return Err(self.shape_err("attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        for s in segments {
            if s.q_len == 0 || s.k_len == 0 {
                return Err(TensorError::Invalid("attention: empty segment".into()));
            }
            if s.q_start + s.q_len > nq {
                return Err(TensorError::RowIndex {
                    op: "attention",
                    index: s.q_start + s.q_len - 1,
                    rows: nq,
                });
            }
            if s.k_start + s.k_len > nk {
                return Err(TensorError::RowIndex {
                    op: "attention",
                    index: s.k_start + s.k_len - 1,
                    rows: nk,
                });
            }
            if s.v_start + s.k_len > nv {
                return Err(TensorError::RowIndex {
                    op: "attention",
                    index: s.v_start + s.k_len - 1,
                    rows: nv,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).values();
        let ks = self.value(k).values();
        let vs = self.value(v).values();
        let mut out = vec![0.0; nq * d];
        let total: usize = segments.iter().map(|s| heads * s.q_len * s.k_len).sum();
        let mut probs = Vec::with_capacity(total);
        for s in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qi = &qs[(s.q_start + i) * d + off..][..dh];
                    let start = probs.len();
                    for j in 0..s.k_len {
                        let kj = &ks[(s.k_start + j) * d + off..][..dh];
                        probs.push(dot(qi, kj) * scale);
                    }
                    let p = &mut probs[start..];
                    softmax_in_place(p);
                    let orow = &mut out[(s.q_start + i) * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vs[(s.v_start + j) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        self.push_op(
            "attention",
            vec![nq, d],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    /// Concatenation, slicing and tiling are all expressed through this op.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let Some(&first) = sources.first() else {
            return Err(TensorError::Invalid("gather_rows: no sources".into()));
        };
        if picks.is_empty() {
            return Err(TensorError::Invalid("gather_rows: no rows".into()));
        }
        let (_, c) = self.dims(first);
        for &s in sources {
            if self.dims(s).1 != c {
                return Err(self.shape_err("gather_rows", first, s));
            }
        }
        let mut out = Vec::with_capacity(picks.len() * c);
        for &(src, row) in picks {
            let Some(&sv) = sources.get(src) else {
                return Err(TensorError::Invalid(format!(
                    "gather_rows: source {src} out of range"
                )));
            };
            let t = self.value(sv);
            if row >= t.rows() {
                return Err(TensorError::RowIndex {
                    op: "gather_rows",
                    index: row,
                    rows: t.rows(),
                });
            }
            out.extend_from_slice(t.row(row));
        }
        self.push_op(
            "gather_rows",
            vec![picks.len(), c],
            out,
            sources,
            Op::GatherRows {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
        )
    }

    /// Sets the listed rows to exactly zero; those rows pass no gradient back.
    pub fn zero_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(x);
        let mut out = self.value(x).values().to_vec();
        for &r in rows {
            if r >= n {
                return Err(TensorError::RowIndex {
                    op: "zero_rows",
                    index: r,
                    rows: n,
                });
            }
            out[r * c..(r + 1) * c].fill(0.0);
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op(
            "zero_rows",
            shape,
            out,
            &[x],
            Op::ZeroRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(self.shape_err("mse", pred, target));
        }
        let p = self.value(pred).values();
        let t = self.value(target).values();
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push_op("mse", vec![1], vec![loss], &[pred, target], Op::Mse { pred, target })
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(logits);
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.value(logits).shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::ClassIndex {
                op: "cross_entropy",
                index: bad,
                classes: c,
            });
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= rows as f64;
        self.push_op(
            "cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `Σ weight·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
            }
            total += w * t.values()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_op(
            "weighted_sum",
            vec![1],
            vec![total],
            &inputs,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).values().iter().sum();
        self.push_op("sum", vec![1], vec![total], &[x], Op::Sum { x })
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that requires
    /// a gradient holds one (zeros when unreachable from the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            self.fill_missing_grads();
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            let corrupt = self.fault == Some(self.nodes[i].op.kind());
            self.nodes[i].grad = Some(g);
            for (v, mut c) in contributions {
                if corrupt {
                    c.iter_mut().for_each(|x| *x *= 1.5);
                }
                self.accumulate(v, &c);
            }
        }
        self.fill_missing_grads();
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn fill_missing_grads(&mut self) {
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    out.push((*a, matmul_nt(g, self.value(*b).values(), m, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, matmul_tn(self.value(*a).values(), g, m, k, n)));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    out.push((*a, zip_map(g, self.value(*b).values(), |x, y| x * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_map(g, self.value(*a).values(), |x, y| x * y)));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    out.push((*x, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let gx = self
                        .value(*x)
                        .values()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gy)| {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gy * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).values();
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = rs * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::SoftmaxRows { x } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((p, gy), gxr) in node
                        .value
                        .values()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gx.chunks_mut(c))
                    {
                        let s = dot(p, gy);
                        for j in 0..c {
                            gxr[j] = p[j] * (gy[j] - s);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, segments, probs, g);
                if self.wants(*q) {
                    out.push((*q, gq));
                }
                if self.wants(*k) {
                    out.push((*k, gk));
                }
                if self.wants(*v) {
                    out.push((*v, gv));
                }
            }
            Op::GatherRows { sources, picks } => {
                let c = node.value.cols();
                let mut bufs: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| self.wants(s).then(|| vec![0.0; self.value(s).len()]))
                    .collect();
                for (i, &(src, row)) in picks.iter().enumerate() {
                    if let Some(buf) = &mut bufs[src] {
                        let dst = &mut buf[row * c..(row + 1) * c];
                        dst.iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                for (s, buf) in sources.iter().zip(bufs) {
                    if let Some(buf) = buf {
                        out.push((*s, buf));
                    }
                }
            }
            Op::ZeroRows { x, rows } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let mut gx = g.to_vec();
                    for &r in rows {
                        gx[r * c..(r + 1) * c].fill(0.0);
                    }
                    out.push((*x, gx));
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).values();
                let t = self.value(*target).values();
                let s = 2.0 * g[0] / p.len() as f64;
                if self.wants(*pred) {
                    out.push((*pred, zip_map(p, t, |a, b| s * (a - b))));
                }
                if self.wants(*target) {
                    out.push((*target, zip_map(p, t, |a, b| -s * (a - b))));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let s = g[0] / targets.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] -= s;
                    }
                    out.push((*logits, gl));
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        out.push((v, vec![w * g[0]]));
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttentionSegment],
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let qs = self.value(q).values();
        let ks = self.value(k).values();
        let vs = self.value(v).values();
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut cursor = 0;
        let mut dp = Vec::new();
        for s in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[cursor..cursor + s.k_len];
                    cursor += s.k_len;
                    let qrow = (s.q_start + i) * d + off;
                    let go = &g[qrow..qrow + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = (s.v_start + j) * d + off;
                        dp.push(dot(go, &vs[vrow..vrow + dh]));
                        for (a, b) in gv[vrow..vrow + dh].iter_mut().zip(go) {
                            *a += pj * b;
                        }
                    }
                    let sum = dot(p, &dp);
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - sum) * scale;
                        let krow = (s.k_start + j) * d + off;
                        for c in 0..dh {
                            gq[qrow + c] += ds * ks[krow + c];
                            gk[krow + c] += ds * qs[qrow + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `[m×k] · [k×n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `[m×n] · [k×n]ᵀ`
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `[m×k]ᵀ · [m×n]`
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}
