//! Minimal tape-based reverse-mode autograd over dense row-major `f64`
//! tensors.
//!
//! A [`Graph`] records one forward pass. Parameters live outside the graph in
//! a [`ParamStore`] and are referenced by index; [`Graph::backward`] returns
//! their gradients as a [`Gradients`] value aligned with the store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 { self.shape[1..].iter().product() } else { self.data.len() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

/// A named learnable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of parameters; order is the serialisation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradients for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    /// In-order elementwise sum, so reductions are independent of scheduling.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        valid: Vec<bool>,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    Dropout(NodeId, Vec<f64>),
    Sum(NodeId),
    KlLoss {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    tracked: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Graph<'p> {
    /// Graph that records for [`Graph::backward`]; no dropout.
    pub fn tracked(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), tracked: true, dropout: None }
    }

    /// Inference graph: no gradients, no dropout.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), tracked: false, dropout: None }
    }

    /// Tracked graph with dropout probability `p` driven by `seed`.
    pub fn training(params: &'p ParamStore, p: f64, seed: u64) -> Self {
        let dropout = (p > 0.0).then(|| (p, ChaCha8Rng::seed_from_u64(seed)));
        Self { params, nodes: Vec::new(), tracked: true, dropout }
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    pub fn train_mode(&self) -> bool {
        self.dropout.is_some()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, shape, needs_grad: needs_grad && self.tracked });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match (&self.nodes[id.0].op, &self.nodes[id.0].value) {
            (Op::Param(p), _) => &self.params.get(*p).value.data,
            (_, Some(t)) => &t.data,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor { shape: self.shape(id).to_vec(), data: self.value(id).to_vec() }
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape.clone();
        self.push(Op::Input, Some(t), shape, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let shape = self.params.get(id).value.shape.clone();
        self.push(Op::Param(id), None, shape, true)
    }

    /// `[n x k] . [k x m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        if k != k2 {
            return Err(Error::invalid(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul(self.value(a), self.value(b), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Some(Tensor { shape: vec![n, m], data: out }), vec![n, m], ng))
    }

    /// Adds a length-`m` bias to every row of `[n x m]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(x);
        if self.value(b).len() != m {
            return Err(Error::invalid("bias length mismatch"));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(m) {
            for (o, v) in row.iter_mut().zip(bias) {
                *o += v;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        let shape = vec![n, m];
        Ok(self.push(Op::AddBias(x, b), Some(Tensor { shape: shape.clone(), data: out }), shape, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid("add shape mismatch"));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Some(Tensor { shape: shape.clone(), data: out }), shape, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| kernels::gelu(*v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Gelu(x), Some(Tensor { shape: shape.clone(), data: out }), shape, ng)
    }

    /// Row-wise layer normalisation with learnable scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(x);
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::invalid("layer norm parameter length mismatch"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut normalized = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xs[i * m..(i + 1) * m];
            let (xhat, inv) = kernels::normalize_row(row);
            inv_std[i] = inv;
            for j in 0..m {
                normalized[i * m + j] = xhat[j];
                out[i * m + j] = xhat[j] * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::LayerNorm { x, gamma, beta, normalized, inv_std };
        Ok(self.push(op, Some(Tensor { shape: vec![n, m], data: out }), vec![n, m], ng))
    }

    /// Multi-head causal self-attention on projected `q`, `k`, `v`
    /// (`[n x d]` each). Position `i` attends to valid `j <= i`; invalid
    /// (padded) positions neither attend nor are attended to and produce
    /// zero output. In train mode dropout is applied to attention weights.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, valid: &[bool]) -> Result<NodeId> {
        let (n, d) = self.dims2(q);
        if self.dims2(k) != (n, d) || self.dims2(v) != (n, d) {
            return Err(Error::invalid("q, k, v shapes differ"));
        }
        if valid.len() != n {
            return Err(Error::invalid(format!("padding mask length {} for {n} positions", valid.len())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{d} channels do not split into {heads} heads")));
        }
        let drop = self.dropout.as_mut().map(|(p, rng)| {
            let keep = 1.0 / (1.0 - *p);
            (0..heads * n * n).map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep }).collect::<Vec<f64>>()
        });
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        kernels::attention_forward(qs, ks, vs, n, d, heads, valid, drop.as_deref(), &mut probs, &mut out);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention { q, k, v, heads, valid: valid.to_vec(), probs, drop };
        Ok(self.push(op, Some(Tensor { shape: vec![n, d], data: out }), vec![n, d], ng))
    }

    /// Inverted dropout; identity outside train mode.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let Some((p, rng)) = self.dropout.as_mut() else { return x };
        let keep = 1.0 / (1.0 - *p);
        let len = self.nodes[x.0].shape.iter().product::<usize>();
        let mask: Vec<f64> = (0..len).map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep }).collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Dropout(x, mask), Some(Tensor { shape: shape.clone(), data: out }), shape, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum(x), Some(Tensor::scalar(s)), vec![], ng)
    }

    /// `sum_i weights[i] * KL(targets_i || softmax(logits_i))` with
    /// predictions floored at [`crate::train::KL_FLOOR`].
    pub fn kl_loss(&mut self, logits: NodeId, targets: Vec<f64>, weights: Vec<f64>) -> Result<NodeId> {
        let (n, c) = self.dims2(logits);
        if targets.len() != n * c || weights.len() != n {
            return Err(Error::invalid("kl_loss target/weight shape mismatch"));
        }
        let zs = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let p = &mut probs[i * c..(i + 1) * c];
            kernels::softmax_into(&zs[i * c..(i + 1) * c], p);
            loss += weights[i] * crate::train::kl_divergence(&targets[i * c..(i + 1) * c], p);
        }
        let ng = self.needs(logits);
        let op = Op::KlLoss { logits, targets, weights, probs };
        Ok(self.push(op, Some(Tensor::scalar(loss)), vec![], ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.tracked {
            return Err(Error::Usage("backward on a graph built without gradient tracking".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |id: NodeId, g: Vec<f64>, adj: &mut Vec<Option<Vec<f64>>>| {
                if !self.needs(id) {
                    return;
                }
                match &mut adj[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    for (a, b) in grads.0[p.0].iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims2(*a);
                    let (_, m) = self.dims2(*b);
                    if self.needs(*a) {
                        let mut da = vec![0.0; n * k];
                        kernels::matmul_bt(&dy, self.value(*b), &mut da, n, m, k);
                        send(*a, da, &mut adj);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * m];
                        kernels::matmul_at(self.value(*a), &dy, &mut db, n, k, m);
                        send(*b, db, &mut adj);
                    }
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    if self.needs(*b) {
                        let mut db = vec![0.0; m];
                        for row in dy.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        send(*b, db, &mut adj);
                    }
                    send(*x, dy, &mut adj);
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut adj);
                    send(*b, dy, &mut adj);
                }
                Op::Gelu(x) => {
                    let g = self.value(*x).iter().zip(&dy).map(|(v, d)| d * kernels::gelu_grad(*v)).collect();
                    send(*x, g, &mut adj);
                }
                Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                    let (n, m) = self.dims2(*x);
                    let gv = self.value(*gamma);
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = vec![0.0; m];
                        let mut db = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                dg[j] += dy[i * m + j] * normalized[i * m + j];
                                db[j] += dy[i * m + j];
                            }
                        }
                        send(*gamma, dg, &mut adj);
                        send(*beta, db, &mut adj);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; n * m];
                        for i in 0..n {
                            let xh = &normalized[i * m..(i + 1) * m];
                            let dxh: Vec<f64> = (0..m).map(|j| dy[i * m + j] * gv[j]).collect();
                            let mean_d = dxh.iter().sum::<f64>() / m as f64;
                            let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                            for j in 0..m {
                                dx[i * m + j] = inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        send(*x, dx, &mut adj);
                    }
                }
                Op::Attention { q, k, v, heads, valid, probs, drop } => {
                    let (n, d) = self.dims2(*q);
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; n * d];
                    let mut dv = vec![0.0; n * d];
                    kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &dy,
                        n,
                        d,
                        *heads,
                        valid,
                        probs,
                        drop.as_deref(),
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    send(*q, dq, &mut adj);
                    send(*k, dk, &mut adj);
                    send(*v, dv, &mut adj);
                }
                Op::Dropout(x, mask) => {
                    let g = dy.iter().zip(mask).map(|(a, b)| a * b).collect();
                    send(*x, g, &mut adj);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    send(*x, vec![dy[0]; len], &mut adj);
                }
                Op::KlLoss { logits, targets, weights, probs } => {
                    let (n, c) = self.dims2(*logits);
                    let mut dz = vec![0.0; n * c];
                    for i in 0..n {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let w = weights[i] * dy[0];
                        let p = &probs[i * c..(i + 1) * c];
                        let t = &targets[i * c..(i + 1) * c];
                        // Floored entries are constants of the loss.
                        let live: f64 = t
                            .iter()
                            .zip(p)
                            .filter(|(_, pj)| **pj >= crate::train::KL_FLOOR)
                            .map(|(tj, _)| tj)
                            .sum();
                        for j in 0..c {
                            let own = if p[j] >= crate::train::KL_FLOOR { t[j] } else { 0.0 };
                            dz[i * c + j] = w * (p[j] * live - own);
                        }
                    }
                    send(*logits, dz, &mut adj);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) mod kernels {
    /// `out[n x m] = a[n x k] . b[k x m]`; each output row depends only on
    /// the matching row of `a`.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * m..(kk + 1) * m];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }

    /// `out[n x k] = dy[n x m] . b^T` where `b` is `[k x m]`.
    pub fn matmul_bt(dy: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
        for i in 0..n {
            let drow = &dy[i * m..(i + 1) * m];
            for kk in 0..k {
                let brow = &b[kk * m..(kk + 1) * m];
                out[i * k + kk] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    }

    /// `out[k x m] += a^T . dy` where `a` is `[n x k]`, `dy` is `[n x m]`.
    pub fn matmul_at(a: &[f64], dy: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let drow = &dy[i * m..(i + 1) * m];
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let orow = &mut out[kk * m..(kk + 1) * m];
                for (o, d) in orow.iter_mut().zip(drow) {
                    *o += aik * d;
                }
            }
        }
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    /// Returns the normalised row and `1 / sqrt(var + eps)`.
    pub fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
        let m = row.len() as f64;
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + super::LAYER_NORM_EPS).sqrt();
        (row.iter().map(|v| (v - mean) * inv).collect(), inv)
    }

    /// Max-subtracted softmax.
    pub fn softmax_into(z: &[f64], out: &mut [f64]) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, v) in out.iter_mut().zip(z) {
            *o = (v - max).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention_forward(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        n: usize,
        d: usize,
        heads: usize,
        valid: &[bool],
        drop: Option<&[f64]>,
        probs: &mut [f64],
        out: &mut [f64],
    ) {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    if !valid[j] {
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let base = (h * n + i) * n;
                let mut total = 0.0;
                for j in 0..=i {
                    if valid[j] {
                        let e = (scores[j] - max).exp();
                        probs[base + j] = e;
                        total += e;
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    if !valid[j] {
                        continue;
                    }
                    probs[base + j] /= total;
                    let w = match drop {
                        Some(m) => probs[base + j] * m[base + j],
                        None => probs[base + j],
                    };
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention_backward(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        dy: &[f64],
        n: usize,
        d: usize,
        heads: usize,
        valid: &[bool],
        probs: &[f64],
        drop: Option<&[f64]>,
        dq: &mut [f64],
        dk: &mut [f64],
        dv: &mut [f64],
    ) {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let base = (h * n + i) * n;
                let doi = &dy[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    if !valid[j] {
                        continue;
                    }
                    let m = drop.map_or(1.0, |m| m[base + j]);
                    let p = probs[base + j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    let dpj = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() * m;
                    dp[j] = dpj;
                    dot += p * dpj;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, g) in dvj.iter_mut().zip(doi) {
                        *o += p * m * g;
                    }
                }
                for j in 0..=i {
                    if !valid[j] {
                        continue;
                    }
                    let ds = probs[base + j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * k[j * d + off + c];
                        dk[j * d + off + c] += ds * q[i * d + off + c];
                    }
                }
            }
        }
    }
}
