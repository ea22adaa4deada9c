//! Arena-style reverse-mode autodiff tape.
//!
//! Each operation appends one node holding its output values; inputs are
//! referenced by `ValueId` index, so the graph is a DAG over a flat `Vec` and
//! replaying it backward visits every node exactly once in reverse execution
//! order. Operation granularity is deliberately coarse (fused layer norm,
//! fused multi-head attention, fused row-wise log-softmax) so graphs stay
//! small and each backward rule can be checked in isolation.
//!
//! Contracts enforced here:
//! - every completed operation leaves finite values, and a completed backward
//!   pass leaves finite gradients; violations surface as `Error::NonFinite`
//!   naming the operation;
//! - leaves created from frozen tensors never receive gradient buffers, so
//!   backward cannot write where the owner does not expect gradients;
//! - repeated `backward` calls accumulate into existing node gradients.

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

pub type ValueId = usize;

/// y = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
pub fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// out += a (m x k) * b (k x n)
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (m x k) * b^T where b is (n x k)
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T * b where a is (k x m), b is (k x n)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    AddRowBias { x: ValueId, bias: ValueId },
    Scale { x: ValueId, c: f64 },
    MulElem { a: ValueId, b: ValueId },
    Gelu { x: ValueId },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, mean: Vec<f64>, invstd: Vec<f64> },
    Attention { q: ValueId, k: ValueId, v: ValueId, n_heads: usize, probs: Vec<f64> },
    LogSoftmaxRows { x: ValueId },
    Softmax1d { x: ValueId },
    ExpVec { x: ValueId },
    PickRowwise { x: ValueId, idx: Vec<usize> },
    Embed { table: ValueId, ids: Vec<usize> },
    StackScalars { xs: Vec<ValueId> },
    SumAll { x: ValueId },
    MeanAll { x: ValueId },
    Dot { a: ValueId, b: ValueId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Scale { .. } => "scale",
            Op::MulElem { .. } => "mul_elem",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::Softmax1d { .. } => "softmax_1d",
            Op::ExpVec { .. } => "exp_vec",
            Op::PickRowwise { .. } => "pick_rowwise",
            Op::Embed { .. } => "embed",
            Op::StackScalars { .. } => "stack_scalars",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::Dot { .. } => "dot",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: Vec<(String, ValueId)>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn scalar_value(&self, id: ValueId) -> Result<f64> {
        let n = &self.nodes[id];
        if n.values.len() != 1 {
            return Err(Error::dim(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.values[0])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Result<ValueId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { op, shape, values, grad: None, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape. The leaf carries gradients only when the
    /// tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Result<ValueId> {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Copies a named parameter onto the tape and remembers the binding so
    /// `pull_grads` can deliver its gradient back to the store.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<ValueId> {
        let t = store.tensor(name)?;
        let id = self.leaf(t)?;
        if t.requires_grad() {
            self.param_bindings.push((name.to_string(), id));
        }
        Ok(id)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<ValueId> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(format!(
                "constant shape {:?} wants {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        self.push(Op::Leaf, shape.to_vec(), values, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<ValueId> {
        self.constant(&[1], vec![v])
    }

    fn rank2(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.rank2(a, "matmul lhs")?;
        let (kb, n) = self.rank2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::dim(format!("matmul inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&self.nodes[a].values, &self.nodes[b].values, m, ka, n, &mut out);
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(Op::Matmul { a, b }, vec![m, n], out, ng)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(Op::Add { a, b }, self.nodes[a].shape.clone(), out, ng)
    }

    /// Adds a length-n bias row to every row of an (m x n) matrix. The bias
    /// may be shaped [n] or [1, n].
    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.rank2(x, "add_row_bias input")?;
        if self.nodes[bias].values.len() != n {
            return Err(Error::dim(format!(
                "bias length {} vs {} columns",
                self.nodes[bias].values.len(),
                n
            )));
        }
        let mut out = self.nodes[x].values.clone();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&self.nodes[bias].values) {
                *o += bv;
            }
        }
        let ng = self.nodes[x].needs_grad || self.nodes[bias].needs_grad;
        self.push(Op::AddRowBias { x, bias }, vec![m, n], out, ng)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v * c).collect();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::Scale { x, c }, self.nodes[x].shape.clone(), out, ng)
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul_elem shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(Op::MulElem { a, b }, self.nodes[a].shape.clone(), out, ng)
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|&v| gelu_value(v)).collect();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::Gelu { x }, self.nodes[x].shape.clone(), out, ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    /// Uses the biased variance (divide by n) and `LAYER_NORM_EPS` inside the
    /// square root.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.rank2(x, "layer_norm input")?;
        if n == 0 {
            return Err(Error::dim("layer_norm over zero columns"));
        }
        if self.nodes[gain].values.len() != n || self.nodes[bias].values.len() != n {
            return Err(Error::dim(format!(
                "layer_norm gain/bias length {}/{} vs {} columns",
                self.nodes[gain].values.len(),
                self.nodes[bias].values.len(),
                n
            )));
        }
        let xv = &self.nodes[x].values;
        let g = &self.nodes[gain].values;
        let b = &self.nodes[bias].values;
        let mut out = vec![0.0; m * n];
        let mut mean = vec![0.0; m];
        let mut invstd = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[i] = mu;
            invstd[i] = is;
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * is * g[j] + b[j];
            }
        }
        let ng = self.nodes[x].needs_grad || self.nodes[gain].needs_grad || self.nodes[bias].needs_grad;
        self.push(
            Op::LayerNorm { x, gain, bias, mean, invstd },
            vec![m, n],
            out,
            ng,
        )
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// q is (Tq x d), k and v are (Tk x d), d divisible by `n_heads`. Scores
    /// use 1/sqrt(d/n_heads); with `causal` set, query i attends to keys
    /// 0..=i (requires Tq == Tk). The row-softmax probabilities are saved for
    /// the backward pass.
    pub fn attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        n_heads: usize,
        causal: bool,
    ) -> Result<ValueId> {
        let (tq, d) = self.rank2(q, "attention queries")?;
        let (tk, dk) = self.rank2(k, "attention keys")?;
        let (tv, dv) = self.rank2(v, "attention values")?;
        if d != dk || d != dv {
            return Err(Error::dim(format!("attention widths q={d} k={dk} v={dv}")));
        }
        if tk != tv {
            return Err(Error::dim(format!("attention key/value rows {tk} vs {tv}")));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim(format!("width {d} not divisible into {n_heads} heads")));
        }
        if causal && tq != tk {
            return Err(Error::dim(format!("causal attention needs square scores, got {tq} x {tk}")));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q].values;
        let kv = &self.nodes[k].values;
        let vv = &self.nodes[v].values;
        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; n_heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &qv[i * d + off..i * d + off + dh];
                let limit = if causal { i + 1 } else { tk };
                let mut maxs = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(limit) {
                    let krow = &kv[j * d + off..j * d + off + dh];
                    let dotp: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    *s = dotp * scale;
                    if *s > maxs {
                        maxs = *s;
                    }
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(limit) {
                    *s = (*s - maxs).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + tk];
                for j in 0..limit {
                    prow[j] = scores[j] / z;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate().take(limit) {
                    let vrow = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let ng = self.nodes[q].needs_grad || self.nodes[k].needs_grad || self.nodes[v].needs_grad;
        self.push(Op::Attention { q, k, v, n_heads, probs }, vec![tq, d], out, ng)
    }

    /// Numerically stable log-softmax applied to each row independently.
    pub fn log_softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (m, n) = self.rank2(x, "log_softmax input")?;
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let ng = self.nodes[x].needs_grad;
        self.push(Op::LogSoftmaxRows { x }, vec![m, n], out, ng)
    }

    /// Softmax over a rank-1 value.
    pub fn softmax_1d(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::dim(format!("softmax_1d wants rank 1, got {s:?}")));
        }
        let xv = &self.nodes[x].values;
        let maxv = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::Softmax1d { x }, self.nodes[x].shape.clone(), out, ng)
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v.exp()).collect();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::ExpVec { x }, self.nodes[x].shape.clone(), out, ng)
    }

    /// out[i] = x[i, idx[i]]
    pub fn pick_rowwise(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (m, n) = self.rank2(x, "pick_rowwise input")?;
        if idx.len() != m {
            return Err(Error::dim(format!("pick_rowwise wants {m} indices, got {}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::contract(format!("pick_rowwise column {bad} out of {n}")));
        }
        let xv = &self.nodes[x].values;
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[i * n + j]).collect();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::PickRowwise { x, idx: idx.to_vec() }, vec![m], out, ng)
    }

    /// Gathers rows of an embedding table: out[i, :] = table[ids[i], :].
    pub fn embed(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (v, d) = self.rank2(table, "embedding table")?;
        if let Some(bad) = ids.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("embedding id {bad} out of {v}")));
        }
        let tv = &self.nodes[table].values;
        let mut out = vec![0.0; ids.len() * d];
        for (i, &t) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[t * d..(t + 1) * d]);
        }
        let ng = self.nodes[table].needs_grad;
        self.push(Op::Embed { table, ids: ids.to_vec() }, vec![ids.len(), d], out, ng)
    }

    /// Concatenates scalar values into a rank-1 vector.
    pub fn stack_scalars(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::dim("stack_scalars of nothing"));
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut ng = false;
        for &id in xs {
            if self.nodes[id].values.len() != 1 {
                return Err(Error::dim(format!(
                    "stack_scalars input has shape {:?}",
                    self.nodes[id].shape
                )));
            }
            out.push(self.nodes[id].values[0]);
            ng |= self.nodes[id].needs_grad;
        }
        self.push(Op::StackScalars { xs: xs.to_vec() }, vec![xs.len()], out, ng)
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.nodes[x].values.iter().sum();
        let ng = self.nodes[x].needs_grad;
        self.push(Op::SumAll { x }, vec![1], vec![s], ng)
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.nodes[x].values.len();
        if n == 0 {
            return Err(Error::dim("mean_all of empty value"));
        }
        let s: f64 = self.nodes[x].values.iter().sum::<f64>() / n as f64;
        let ng = self.nodes[x].needs_grad;
        self.push(Op::MeanAll { x }, vec![1], vec![s], ng)
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a].values.len() != self.nodes[b].values.len() {
            return Err(Error::dim(format!(
                "dot lengths {} vs {}",
                self.nodes[a].values.len(),
                self.nodes[b].values.len()
            )));
        }
        let s: f64 = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(Op::Dot { a, b }, vec![1], vec![s], ng)
    }

    /// Accumulates d(loss)/d(node) into every gradient-carrying node at or
    /// below `loss`. `loss` must be scalar. Each call propagates a fresh unit
    /// seed, so repeated calls without reset sum their gradients.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::contract(format!("backward from unknown value {loss}")));
        }
        if self.nodes[loss].values.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        if !self.nodes[loss].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let go = hi[0].take().expect("checked above");
            self.propagate(i, &go, lo)?;
            hi[0] = Some(go);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(gv) = g else { continue };
            if !gv.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("backward through {}", node.op.name())));
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(gv),
            }
        }
        Ok(())
    }

    fn add_into(&self, lo: &mut [Option<Vec<f64>>], id: ValueId, contribution: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let g = lo[id].get_or_insert_with(|| vec![0.0; self.nodes[id].values.len()]);
        for (gv, &c) in g.iter_mut().zip(contribution) {
            *gv += c;
        }
    }

    /// Takes the gradient buffer for `id` out of `lo`, creating it if absent.
    /// Caller must put it back.
    fn grad_slot(&self, lo: &mut [Option<Vec<f64>>], id: ValueId) -> Vec<f64> {
        lo[id]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id].values.len()])
    }

    fn propagate(&self, out: ValueId, go: &[f64], lo: &mut [Option<Vec<f64>>]) -> Result<()> {
        let op = &self.nodes[out].op;
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    let mut ga = self.grad_slot(lo, *a);
                    mm_nt(go, &self.nodes[*b].values, m, n, k, &mut ga);
                    lo[*a] = Some(ga);
                }
                if self.nodes[*b].needs_grad {
                    let mut gb = self.grad_slot(lo, *b);
                    mm_tn(&self.nodes[*a].values, go, k, m, n, &mut gb);
                    lo[*b] = Some(gb);
                }
            }
            Op::Add { a, b } => {
                self.add_into(lo, *a, go);
                self.add_into(lo, *b, go);
            }
            Op::AddRowBias { x, bias } => {
                self.add_into(lo, *x, go);
                if self.nodes[*bias].needs_grad {
                    let n = self.nodes[*bias].values.len();
                    let mut col = vec![0.0; n];
                    for (i, &g) in go.iter().enumerate() {
                        col[i % n] += g;
                    }
                    self.add_into(lo, *bias, &col);
                }
            }
            Op::Scale { x, c } => {
                let contrib: Vec<f64> = go.iter().map(|g| g * c).collect();
                self.add_into(lo, *x, &contrib);
            }
            Op::MulElem { a, b } => {
                if self.nodes[*a].needs_grad {
                    let contrib: Vec<f64> =
                        go.iter().zip(&self.nodes[*b].values).map(|(g, v)| g * v).collect();
                    self.add_into(lo, *a, &contrib);
                }
                if self.nodes[*b].needs_grad {
                    let contrib: Vec<f64> =
                        go.iter().zip(&self.nodes[*a].values).map(|(g, v)| g * v).collect();
                    self.add_into(lo, *b, &contrib);
                }
            }
            Op::Gelu { x } => {
                let contrib: Vec<f64> = go
                    .iter()
                    .zip(&self.nodes[*x].values)
                    .map(|(g, &v)| g * gelu_derivative(v))
                    .collect();
                self.add_into(lo, *x, &contrib);
            }
            Op::LayerNorm { x, gain, bias, mean, invstd } => {
                let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let xv = &self.nodes[*x].values;
                let g = &self.nodes[*gain].values;
                if self.nodes[*x].needs_grad {
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gorow = &go[i * n..(i + 1) * n];
                        let is = invstd[i];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean[i]) * is;
                            let dxhat = gorow[j] * g[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (row[j] - mean[i]) * is;
                            let dxhat = gorow[j] * g[j];
                            gx[i * n + j] =
                                is * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                    self.add_into(lo, *x, &gx);
                }
                if self.nodes[*gain].needs_grad {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let xhat = (xv[i * n + j] - mean[i]) * invstd[i];
                            gg[j] += go[i * n + j] * xhat;
                        }
                    }
                    self.add_into(lo, *gain, &gg);
                }
                if self.nodes[*bias].needs_grad {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += go[i * n + j];
                        }
                    }
                    self.add_into(lo, *bias, &gb);
                }
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (tq, d) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let tk = self.nodes[*k].shape[0];
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = &self.nodes[*q].values;
                let kv = &self.nodes[*k].values;
                let vv = &self.nodes[*v].values;
                let mut gq = vec![0.0; tq * d];
                let mut gk = vec![0.0; tk * d];
                let mut gv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tk];
                let mut ds = vec![0.0; tk];
                for h in 0..*n_heads {
                    let off = h * dh;
                    for i in 0..tq {
                        let prow = &probs[(h * tq + i) * tk..(h * tq + i) * tk + tk];
                        let gorow = &go[i * d + off..i * d + off + dh];
                        // dP = dO . V^T ; dV += P^T . dO
                        for j in 0..tk {
                            let vrow = &vv[j * d + off..j * d + off + dh];
                            let mut acc = 0.0;
                            for (gg, &x) in gorow.iter().zip(vrow) {
                                acc += gg * x;
                            }
                            dp[j] = acc;
                            if prow[j] != 0.0 {
                                let gvrow = &mut gv[j * d + off..j * d + off + dh];
                                for (gvj, &gg) in gvrow.iter_mut().zip(gorow) {
                                    *gvj += prow[j] * gg;
                                }
                            }
                        }
                        // dS = P * (dP - sum(dP * P)); masked entries have P = 0
                        let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for j in 0..tk {
                            ds[j] = prow[j] * (dp[j] - dot);
                        }
                        // dQ += dS . K * scale ; dK += dS^T . Q * scale
                        let qrow = &qv[i * d + off..i * d + off + dh];
                        let gqrow = &mut gq[i * d + off..i * d + off + dh];
                        for j in 0..tk {
                            if ds[j] == 0.0 {
                                continue;
                            }
                            let c = ds[j] * scale;
                            let krow = &kv[j * d + off..j * d + off + dh];
                            for (gqj, &x) in gqrow.iter_mut().zip(krow) {
                                *gqj += c * x;
                            }
                            let gkrow = &mut gk[j * d + off..j * d + off + dh];
                            for (gkj, &x) in gkrow.iter_mut().zip(qrow) {
                                *gkj += c * x;
                            }
                        }
                    }
                }
                self.add_into(lo, *q, &gq);
                self.add_into(lo, *k, &gk);
                self.add_into(lo, *v, &gv);
            }
            Op::LogSoftmaxRows { x } => {
                let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let yv = &self.nodes[out].values;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let gsum: f64 = go[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = go[i * n + j] - yv[i * n + j].exp() * gsum;
                    }
                }
                self.add_into(lo, *x, &gx);
            }
            Op::Softmax1d { x } => {
                let yv = &self.nodes[out].values;
                let dot: f64 = go.iter().zip(yv).map(|(g, y)| g * y).sum();
                let gx: Vec<f64> = go.iter().zip(yv).map(|(g, y)| y * (g - dot)).collect();
                self.add_into(lo, *x, &gx);
            }
            Op::ExpVec { x } => {
                let contrib: Vec<f64> =
                    go.iter().zip(&self.nodes[out].values).map(|(g, y)| g * y).collect();
                self.add_into(lo, *x, &contrib);
            }
            Op::PickRowwise { x, idx } => {
                let n = self.nodes[*x].shape[1];
                let mut gx = vec![0.0; self.nodes[*x].values.len()];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * n + j] += go[i];
                }
                self.add_into(lo, *x, &gx);
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let mut gt = vec![0.0; self.nodes[*table].values.len()];
                for (i, &t) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[t * d + j] += go[i * d + j];
                    }
                }
                self.add_into(lo, *table, &gt);
            }
            Op::StackScalars { xs } => {
                for (i, &id) in xs.iter().enumerate() {
                    self.add_into(lo, id, &go[i..i + 1]);
                }
            }
            Op::SumAll { x } => {
                let contrib = vec![go[0]; self.nodes[*x].values.len()];
                self.add_into(lo, *x, &contrib);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].values.len();
                let contrib = vec![go[0] / n as f64; n];
                self.add_into(lo, *x, &contrib);
            }
            Op::Dot { a, b } => {
                if self.nodes[*a].needs_grad {
                    let contrib: Vec<f64> =
                        self.nodes[*b].values.iter().map(|v| go[0] * v).collect();
                    self.add_into(lo, *a, &contrib);
                }
                if self.nodes[*b].needs_grad {
                    let contrib: Vec<f64> =
                        self.nodes[*a].values.iter().map(|v| go[0] * v).collect();
                    self.add_into(lo, *b, &contrib);
                }
            }
        }
        Ok(())
    }

    /// Adds node gradients of bound parameters into the store's gradient
    /// buffers. Call once per backward pass.
    pub fn pull_grads(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, id) in &self.param_bindings {
            if let Some(ng) = self.grad(*id) {
                let t = store.tensor_mut(name)?;
                let g = t
                    .grad_mut()
                    .ok_or_else(|| Error::contract(format!("parameter '{name}' is frozen")))?;
                for (gv, &nv) in g.iter_mut().zip(ng) {
                    *gv += nv;
                }
            }
        }
        Ok(())
    }
}
