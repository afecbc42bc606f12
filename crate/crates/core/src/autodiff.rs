//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Tape`] records every operation in topological order; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every
//! `requires_grad` leaf reachable from the loss. Compute is f32 with f64
//! accumulation inside reductions (matrix products, sums, norms, softmax
//! denominators), which keeps the finite-difference checks meaningful.
//!
//! Shapes are validated on every operation; there is no broadcasting beyond
//! scalar-times-tensor and the explicit row-broadcast bias add.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulScalarVar(Var, Var),
    Exp(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize, temperature: f32 },
    L2NormalizeRows(Var),
    MeanRows { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, from: usize, to: usize },
    ConcatCols(Vec<Var>),
    AddRowBroadcast { x: Var, bias: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    CausalMask(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NEG_MASK: f32 = -1e30;
const L2_EPS: f32 = 1e-12;
const PROB_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a differentiated leaf (parameters) or a constant input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a frozen input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise and scalar ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        Ok(self.push(value, self.requires_grad(a), Op::Scale(a, c)))
    }

    /// Tensor times a one-element tensor (the only tensor-scalar broadcast).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Contract(format!(
                "mul_scalar_var expects a one-element scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|v| v * sv);
        Ok(self.push(value, self.any_grad(&[a, s]), Op::MulScalarVar(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f32::exp);
        Ok(self.push(value, self.requires_grad(a), Op::Exp(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_fwd);
        Ok(self.push(value, self.requires_grad(a), Op::Gelu(a)))
    }

    // ---- shape ----

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, self.requires_grad(a), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, self.requires_grad(a), Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if from >= to || to > n {
            return Err(Error::Contract(format!(
                "slice_cols {from}..{to} out of bounds for width {n}"
            )));
        }
        let w = to - from;
        let mut out = vec![0.0f32; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&t.data()[i * n + from..i * n + to]);
        }
        let value = Tensor::new(vec![m, w], out)?;
        Ok(self.push(value, self.requires_grad(a), Op::SliceCols { x: a, from, to }))
    }

    /// Stack inputs along rows. Rank-1 inputs count as a single row; every
    /// input must share the same width.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_rows of zero inputs".into()));
        }
        let width = row_width(self.value(inputs[0]))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in inputs {
            let t = self.value(v);
            if row_width(t)? != width {
                return Err(Error::shape("concat_rows", &[width], t.shape()));
            }
            rows += t.numel() / width;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(value, self.any_grad(inputs), Op::ConcatRows(inputs.to_vec())))
    }

    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_cols of zero inputs".into()));
        }
        let (m, _) = self.value(inputs[0]).dims2()?;
        let widths: Vec<usize> = inputs
            .iter()
            .map(|&v| self.value(v).dims2().map(|(mi, n)| if mi == m { n } else { usize::MAX }))
            .collect::<Result<_>>()?;
        if widths.contains(&usize::MAX) {
            return Err(Error::Contract("concat_cols row-count mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; m * total];
        let mut off = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let t = self.value(v);
            for i in 0..m {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, self.any_grad(inputs), Op::ConcatCols(inputs.to_vec())))
    }

    // ---- gather / scatter ----

    /// Select rows by index; duplicates allowed. Also serves as the
    /// embedding lookup (table gathered by token id).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("gather_rows index {bad} >= {m}")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(
            value,
            self.requires_grad(a),
            Op::GatherRows { x: a, idx: idx.to_vec() },
        ))
    }

    /// Embedding lookup: alias for a row gather on the embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean of the rows selected by a non-empty index set; returns a vector.
    pub fn mean_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if idx.is_empty() {
            return Err(Error::Contract("mean_rows over an empty index set".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("mean_rows index {bad} >= {m}")));
        }
        let mut acc = vec![0.0f64; n];
        for &i in idx {
            for j in 0..n {
                acc[j] += t.data()[i * n + j] as f64;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let out: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            self.requires_grad(a),
            Op::MeanRows { x: a, idx: idx.to_vec() },
        ))
    }

    /// Sum rows of `a` into `num_rows` buckets: out[i] = Σ_{j: idx[j]=i} a[j].
    /// Every bucket in [0, num_rows) must appear in `idx`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], num_rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if idx.len() != m {
            return Err(Error::Contract(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        let mut seen = vec![false; num_rows];
        for &i in idx {
            if i >= num_rows {
                return Err(Error::Contract(format!(
                    "scatter_add_rows index {i} >= {num_rows}"
                )));
            }
            seen[i] = true;
        }
        if let Some(hole) = seen.iter().position(|&s| !s) {
            return Err(Error::Contract(format!(
                "scatter_add_rows: bucket {hole} receives no rows (index vector must be dense)"
            )));
        }
        let mut out = vec![0.0f32; num_rows * n];
        for (j, &i) in idx.iter().enumerate() {
            for c in 0..n {
                out[i * n + c] += t.data()[j * n + c];
            }
        }
        let value = Tensor::new(vec![num_rows, n], out)?;
        Ok(self.push(
            value,
            self.requires_grad(a),
            Op::ScatterAddRows { x: a, idx: idx.to_vec() },
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let value = Tensor::new(vec![m, n], mm(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Matmul(a, b)))
    }

    /// x·w + bias, the standard dense layer.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_broadcast(y, bias)
    }

    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tb.shape() != [n] {
            return Err(Error::shape("add_row_broadcast", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, self.any_grad(&[x, bias]), Op::AddRowBroadcast { x, bias }))
    }

    // ---- normalization and activations ----

    /// Temperature softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f32) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(x);
        if axis >= t.rank().max(1) {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let mut out = t.data().to_vec();
        for_each_lane(t.shape(), axis, |offsets| {
            let mut max = f32::NEG_INFINITY;
            for &o in offsets {
                max = max.max(out[o]);
            }
            let mut denom = 0.0f64;
            for &o in offsets {
                let e = (((out[o] - max) / temperature) as f64).exp();
                out[o] = e as f32;
                denom += e;
            }
            for &o in offsets {
                out[o] = (out[o] as f64 / denom) as f32;
            }
        });
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            self.requires_grad(x),
            Op::Softmax { x, axis, temperature },
        ))
    }

    /// Divide each row by max(‖row‖₂, 1e-12); zero rows pass through.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut out = t.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            let denom = norm.max(L2_EPS);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, self.requires_grad(x), Op::L2NormalizeRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = tx.dims2()?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..n {
                let xhat = ((row[j] as f64 - mean) * inv) as f32;
                out[i * n + j] = xhat * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            self.any_grad(&[x, gamma, beta]),
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    // ---- masking, losses, reductions ----

    /// Add a strictly-upper-triangular -1e30 mask so row i only attends to
    /// columns ≤ i after the following softmax.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if m != n {
            return Err(Error::shape("causal_mask", t.shape(), t.shape()));
        }
        let mut out = t.data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                out[i * n + j] += NEG_MASK;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, self.requires_grad(x), Op::CausalMask(x)))
    }

    /// Mean over rows of -log softmax(logits)[target], probabilities clamped
    /// at 1e-12 before the log.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.dims2()?;
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                m
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("cross_entropy target {bad} >= {n}")));
        }
        let mut acc = 0.0f64;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let p = ((row[tgt] - max) as f64).exp() / denom;
            // Clamp only genuinely small probabilities; NaN must propagate.
            let clamped = if p < PROB_FLOOR { PROB_FLOOR } else { p };
            acc -= clamped.ln();
        }
        let value = Tensor::scalar((acc / m as f64) as f32);
        Ok(self.push(
            value,
            self.requires_grad(logits),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar(total as f32);
        Ok(self.push(value, self.requires_grad(x), Op::SumAll(x)))
    }

    /// Multi-head scaled-dot-product attention composed from primitive ops.
    /// `q`, `k`, `v` are n×d with d divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(Error::shape("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!("attention: {d} dims not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * hd, (h + 1) * hd);
            let qh = self.slice_cols(q, from, to)?;
            let kh = self.slice_cols(k, from, to)?;
            let vh = self.slice_cols(v, from, to)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale)?;
            let scores = if causal { self.causal_mask(scores)? } else { scores };
            let attn = self.softmax(scores, 1, 1.0)?;
            outputs.push(self.matmul(attn, vh)?);
        }
        self.concat_cols(&outputs)
    }

    // ---- backward ----

    /// Accumulate ∂loss/∂node for every node the scalar `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        let mut needed = vec![false; self.nodes.len()];
        needed[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                if self.nodes[input.0].requires_grad {
                    needed[input.0] = true;
                }
            }
        }
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            if !needed[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_step(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_step(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, zip_mul(g, tb));
                self.acc(grads, *b, zip_mul(g, ta));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).data()[0];
                self.acc(grads, *a, g.map(|v| v * sv));
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &av)| gv as f64 * av as f64)
                    .sum();
                let mut ds = Tensor::zeros(self.value(*s).shape().to_vec());
                ds.data_mut()[0] = dot as f32;
                self.acc(grads, *s, ds);
            }
            Op::Exp(a) => {
                self.acc(grads, *a, zip_mul(g, &node.value));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Transpose(a) => {
                let (n, m) = node.value.dims2()?;
                let mut out = vec![0.0f32; m * n];
                for r in 0..n {
                    for c in 0..m {
                        out[c * n + r] = g.data()[r * m + c];
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![m, n], out)?);
            }
            Op::Reshape(a) => {
                let orig = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshaped(orig)?);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.requires_grad(*a) {
                    let da = mm_nt(g.data(), tb.data(), m, n, k);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(ta.data(), g.data(), m, k, n);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Softmax { x, axis, temperature } => {
                let y = &node.value;
                let mut dx = g.data().to_vec();
                for_each_lane(y.shape(), *axis, |offsets| {
                    let mut dot = 0.0f64;
                    for &o in offsets {
                        dot += g.data()[o] as f64 * y.data()[o] as f64;
                    }
                    for &o in offsets {
                        dx[o] = ((y.data()[o] as f64
                            * (g.data()[o] as f64 - dot))
                            / *temperature as f64) as f32;
                    }
                });
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::L2NormalizeRows(x) => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2()?;
                let y = &node.value;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let xr = &tx.data()[i * n..(i + 1) * n];
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let norm = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                    let denom = norm.max(L2_EPS as f64);
                    if norm < L2_EPS as f64 {
                        for j in 0..n {
                            dx[i * n + j] = (gr[j] as f64 / denom) as f32;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv as f64 * gv as f64).sum();
                        for j in 0..n {
                            dx[i * n + j] =
                                ((gr[j] as f64 - yr[j] as f64 * dot) / denom) as f32;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::MeanRows { x, idx } => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2()?;
                let mut dx = vec![0.0f32; m * n];
                let inv = 1.0 / idx.len() as f32;
                for &r in idx {
                    for j in 0..n {
                        dx[r * n + j] += g.data()[j] * inv;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2()?;
                let mut dx = vec![0.0f32; m * n];
                for (out_row, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g.data()[out_row * n + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::ScatterAddRows { x, idx } => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2()?;
                let mut dx = vec![0.0f32; m * n];
                for (j, &bucket) in idx.iter().enumerate() {
                    for c in 0..n {
                        dx[j * n + c] = g.data()[bucket * n + c];
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::ConcatRows(inputs) => {
                let width = row_width(&node.value)?;
                let mut row = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let rows = t.numel() / width;
                    let slice = g.data()[row * width..(row + rows) * width].to_vec();
                    row += rows;
                    if self.requires_grad(v) {
                        self.acc(grads, v, Tensor::new(t.shape().to_vec(), slice)?);
                    }
                }
            }
            Op::ConcatCols(inputs) => {
                let (m, total) = node.value.dims2()?;
                let mut off = 0;
                for &v in inputs {
                    let (_, w) = self.value(v).dims2()?;
                    if self.requires_grad(v) {
                        let mut dv = vec![0.0f32; m * w];
                        for i in 0..m {
                            dv[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, v, Tensor::new(vec![m, w], dv)?);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, from, to } => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2()?;
                let w = to - from;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + from..i * n + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::AddRowBroadcast { x, bias } => {
                self.acc(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let (m, n) = node.value.dims2()?;
                    let mut db = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j] as f64;
                        }
                    }
                    self.acc(
                        grads,
                        *bias,
                        Tensor::new(vec![n], db.iter().map(|&v| v as f32).collect())?,
                    );
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (m, n) = tx.dims2()?;
                let mut dx = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                for i in 0..m {
                    let row = &tx.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; n];
                    for j in 0..n {
                        xhat[j] = (row[j] as f64 - mean) * inv;
                        let dxh = gr[j] as f64 * tg.data()[j] as f64;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                        dgamma[j] += gr[j] as f64 * xhat[j];
                        dbeta[j] += gr[j] as f64;
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dxh = gr[j] as f64 * tg.data()[j] as f64;
                        dx[i * n + j] =
                            (inv * (dxh - sum_dxhat / nf - xhat[j] * sum_dxhat_xhat / nf)) as f32;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], dx)?);
                if self.requires_grad(*gamma) {
                    self.acc(
                        grads,
                        *gamma,
                        Tensor::new(vec![n], dgamma.iter().map(|&v| v as f32).collect())?,
                    );
                }
                if self.requires_grad(*beta) {
                    self.acc(
                        grads,
                        *beta,
                        Tensor::new(vec![n], dbeta.iter().map(|&v| v as f32).collect())?,
                    );
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let (m, n) = t.dims2()?;
                let scale = g.data()[0] / m as f32;
                let mut dx = vec![0.0f32; m * n];
                for (i, &tgt) in targets.iter().enumerate() {
                    let row = &t.data()[i * n..(i + 1) * n];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
                    for j in 0..n {
                        let p = (((row[j] - max) as f64).exp() / denom) as f32;
                        let ind = if j == tgt { 1.0 } else { 0.0 };
                        dx[i * n + j] = scale * (p - ind);
                    }
                }
                self.acc(grads, *logits, Tensor::new(vec![m, n], dx)?);
            }
            Op::CausalMask(x) => {
                self.acc(grads, *x, g.clone());
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                let t = self.value(*x);
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), vec![gv; t.numel()])?);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::MulScalarVar(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _) | Op::Exp(a) | Op::Transpose(a) | Op::Reshape(a) | Op::Gelu(a)
        | Op::CausalMask(a) | Op::SumAll(a) | Op::L2NormalizeRows(a) => vec![*a],
        Op::Softmax { x, .. }
        | Op::MeanRows { x, .. }
        | Op::GatherRows { x, .. }
        | Op::ScatterAddRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::CrossEntropy { logits: x, .. } => vec![*x],
        Op::AddRowBroadcast { x, bias } => vec![*x, *bias],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
    }
}

fn row_width(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        [_, n] => Ok(*n),
        other => Err(Error::Contract(format!("expected rank 1 or 2, got {other:?}"))),
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
    .expect("shapes checked at forward time")
}

fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_fwd(x: f32) -> f32 {
    let c = (2.0f64 / std::f64::consts::PI).sqrt();
    let x64 = x as f64;
    (0.5 * x64 * (1.0 + (c * (x64 + 0.044715 * x64 * x64 * x64)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let c = (2.0f64 / std::f64::consts::PI).sqrt();
    let x64 = x as f64;
    let u = c * (x64 + 0.044715 * x64 * x64 * x64);
    let t = u.tanh();
    (0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x64 * x64)) as f32
}

/// f64-accumulated matrix products. `mm` is a·b, `mm_nt` is a·bᵀ, `mm_tn`
/// is aᵀ·b, with dimensions named for the untransposed operands.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    // a is m×n, b is k×n, result m×k = a·bᵀ.
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0f64;
            for p in 0..n {
                acc += arow[p] as f64 * brow[p] as f64;
            }
            out[i * k + j] = acc as f32;
        }
    }
    out
}

fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // a is m×k, b is m×n, result k×n = aᵀ·b.
    let mut out = vec![0.0f64; k * n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = arow[i] as f64;
            for j in 0..n {
                out[i * n + j] += av * brow[j] as f64;
            }
        }
    }
    out.iter().map(|&v| v as f32).collect()
}

/// Invoke `f` with the flat offsets of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    if shape.is_empty() {
        f(&[0]);
        return;
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut offsets = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (l, off) in offsets.iter_mut().enumerate() {
                *off = o * len * inner + l * inner + i;
            }
            f(&offsets);
        }
    }
}
