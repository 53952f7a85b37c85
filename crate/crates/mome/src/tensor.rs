//! Dense f64 tensors on a reverse-mode tape.
//!
//! A [`Tape`] is a per-forward-pass arena: every operation appends one
//! [`Tensor`] node and records enough of its inputs to run the chain rule
//! backwards. The tape is rebuilt from scratch for every training step;
//! persistent weights live outside the tape as [`ParamTensor`]s and are
//! copied in as leaves each pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of a node within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// A tensor value recorded on the tape. 1-D tensors have `shape = [n]`,
/// 2-D tensors are row-major with `shape = [rows, cols]`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: NodeId,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

/// A persistent parameter or buffer living outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param data length must match shape"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// Gaussian init with the given std, seeded for reproducibility.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gauss(rng) * std).collect();
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// FNV-1a over the raw little-endian bytes; used by freeze audits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Box-Muller standard normal from a seeded stream.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gradients keyed by parameter name, produced after `backward`.
#[derive(Debug, Default)]
pub struct GradientMap {
    pub entries: BTreeMap<String, ParamTensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.get(name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    VecMat { v: NodeId, m: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    MulScalar { a: NodeId, s: NodeId },
    Relu { a: NodeId },
    SoftmaxLastDim { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MeanPoolRows { x: NodeId },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Transpose { x: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    AddRowVec { x: NodeId, b: NodeId },
    /// Mean of -log softmax(logits)[target] over rows with target >= 0.
    CrossEntropyRows { logits: NodeId, targets: Vec<i64> },
    CosineSim { a: NodeId, b: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    Index { v: NodeId, i: usize },
    /// Test-only op whose backward rule is deliberately wrong (treats relu
    /// as identity); exists to prove the gradient checker catches bugs.
    #[cfg(test)]
    ReluWrongGrad { a: NodeId },
}

/// Row-major matmul, ikj order for cache friendliness.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn shape2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected 2-D tensor, got shape {s:?}"))),
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None, node_id: id });
        self.ops.push(op);
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length must match shape"
        );
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, p: &ParamTensor, requires_grad: bool) -> NodeId {
        self.push(p.shape.clone(), p.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![1], vec![v], false)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = shape2(self.node(a))?;
        let (kb, n) = shape2(self.node(b))?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, req, Op::MatMul { a, b }))
    }

    /// `[q] x [q, r] -> [r]`
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let q = match self.shape(v) {
            [q] => *q,
            s => return Err(Error::Shape(format!("vecmat lhs must be 1-D, got {s:?}"))),
        };
        let (qm, r) = shape2(self.node(m))?;
        if q != qm {
            return Err(Error::Shape(format!(
                "vecmat dimensions disagree: [{q}] vs [{qm}, {r}]"
            )));
        }
        let data = matmul_raw(self.data(v), self.data(m), 1, q, r);
        let req = self.requires(v) || self.requires(m);
        Ok(self.push(vec![r], data, req, Op::VecMat { v, m }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, req, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::Scale { a, c })
    }

    /// Multiply every element of `a` by the scalar node `s` (shape `[1]`).
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.node(s).numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar expects scalar rhs, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(shape, data, req, Op::MulScalar { a, s }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::Relu { a })
    }

    /// Softmax over the last dimension, with max subtraction for stability.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| {
            Error::Shape("softmax on zero-rank tensor".to_string())
        })?;
        if last == 0 {
            return Err(Error::Shape("softmax over empty last dimension".to_string()));
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let req = self.requires(a);
        Ok(self.push(shape, data, req, Op::SoftmaxLastDim { a }))
    }

    /// Normalize each trailing-dim slice of `x` to mean 0 / variance 1, then
    /// apply the affine `gamma * x_hat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm dims disagree: x {:?}, gamma {:?}, beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv) + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(shape, data, req, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// `[L, d] -> [d]`, the column means.
    pub fn mean_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (l, d) = shape2(self.node(x))?;
        if l == 0 {
            return Err(Error::Shape("mean_pool_rows over zero rows".to_string()));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; d];
        for i in 0..l {
            for j in 0..d {
                out[j] += xd[i * d + j];
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        let req = self.requires(x);
        Ok(self.push(vec![d], out, req, Op::MeanPoolRows { x }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (l, d) = shape2(self.node(x))?;
        if start + len > l {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {start}+{len}) out of range for {l} rows"
            )));
        }
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        let req = self.requires(x);
        Ok(self.push(vec![len, d], data, req, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (l, d) = shape2(self.node(x))?;
        if start + len > d {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {d} cols"
            )));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(l * len);
        for i in 0..l {
            data.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let req = self.requires(x);
        Ok(self.push(vec![l, len], data, req, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".to_string()));
        }
        let (_, d) = shape2(self.node(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut req = false;
        for &p in parts {
            let (r, dp) = shape2(self.node(p))?;
            if dp != d {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {d} vs {dp}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
            req |= self.requires(p);
        }
        Ok(self.push(vec![rows, d], data, req, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".to_string()));
        }
        let (l, _) = shape2(self.node(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (lp, w) = shape2(self.node(p))?;
            if lp != l {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {l} vs {lp}"
                )));
            }
            widths.push(w);
            total += w;
            req |= self.requires(p);
        }
        let mut data = Vec::with_capacity(l * total);
        for i in 0..l {
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![l, total], data, req, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = shape2(self.node(x))?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![c, r], data, req, Op::Transpose { x }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(vec![1], vec![s], req, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).numel().max(1) as f64;
        let s: f64 = self.data(a).iter().sum::<f64>() / n;
        let req = self.requires(a);
        self.push(vec![1], vec![s], req, Op::Mean { a })
    }

    /// Add a `[d]` vector to every row of a `[L, d]` tensor.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (l, d) = shape2(self.node(x))?;
        if self.shape(b) != [d] {
            return Err(Error::Shape(format!(
                "add_row_vec dims disagree: {:?} vs {:?}",
                self.shape(x),
                self.shape(b)
            )));
        }
        let bd = self.data(b).to_vec();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(l * d);
        for i in 0..l {
            for j in 0..d {
                data.push(xd[i * d + j] + bd[j]);
            }
        }
        let req = self.requires(x) || self.requires(b);
        Ok(self.push(vec![l, d], data, req, Op::AddRowVec { x, b }))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    /// Targets of `-1` are padding and excluded.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[i64]) -> Result<NodeId> {
        let (l, v) = shape2(self.node(logits))?;
        if targets.len() != l {
            return Err(Error::Shape(format!(
                "cross_entropy targets len {} vs {l} logit rows",
                targets.len()
            )));
        }
        let n_valid = targets.iter().filter(|&&t| t >= 0).count();
        if n_valid == 0 {
            return Err(Error::Train("cross entropy over all-padding target".to_string()));
        }
        let xd = self.data(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if t >= v {
                return Err(Error::Shape(format!(
                    "target id {t} out of range for vocab {v}"
                )));
            }
            let row = &xd[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            total += -(row[t] - m - z.ln());
        }
        let loss = total / n_valid as f64;
        let req = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
        ))
    }

    /// Cosine similarity of two `[d]` vectors. If either vector is exactly
    /// zero the result is 0 with zero gradient, keeping losses finite when
    /// expert outputs start at zero.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return Err(Error::Shape(format!(
                "cosine_sim expects matching 1-D shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let na: f64 = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            ad.iter().zip(bd).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![1], vec![c], req, Op::CosineSim { a, b }))
    }

    /// Embedding-style lookup: out row i = table row ids[i].
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = shape2(self.node(table))?;
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!(
                    "gather index {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            req,
            Op::GatherRows { table, ids: ids.to_vec() },
        ))
    }

    /// Extract element `i` of a 1-D tensor as a scalar node.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let n = match self.shape(v) {
            [n] => *n,
            s => return Err(Error::Shape(format!("index expects 1-D tensor, got {s:?}"))),
        };
        if i >= n {
            return Err(Error::Shape(format!("index {i} out of range for length {n}")));
        }
        let val = self.data(v)[i];
        let req = self.requires(v);
        Ok(self.push(vec![1], vec![val], req, Op::Index { v, i }))
    }

    #[cfg(test)]
    fn relu_wrong_grad(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::ReluWrongGrad { a })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every `requires_grad` node on the path; off-path nodes keep `None`
    /// (read back as zeros by [`Tape::gradient_map`]).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.node(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            let op = self.ops[i].clone();
            self.backprop_one(NodeId(i), &op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_one(&mut self, out: NodeId, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = shape2(self.node(*a)).unwrap();
                let (_, n) = shape2(self.node(*b)).unwrap();
                if self.requires(*a) {
                    // dA = G . B^T
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bd[p * n + j];
                            }
                        }
                    }
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    // dB = A^T . G
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::VecMat { v, m } => {
                let q = self.node(*v).numel();
                let (_, r) = shape2(self.node(*m)).unwrap();
                if self.requires(*v) {
                    let md = self.data(*m);
                    let mut dv = vec![0.0; q];
                    for p in 0..q {
                        for j in 0..r {
                            dv[p] += md[p * r + j] * g[j];
                        }
                    }
                    self.accumulate(*v, dv);
                }
                if self.requires(*m) {
                    let vd = self.data(*v);
                    let mut dm = vec![0.0; q * r];
                    for p in 0..q {
                        for j in 0..r {
                            dm[p * r + j] = vd[p] * g[j];
                        }
                    }
                    self.accumulate(*m, dm);
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.requires(*b) {
                    self.accumulate(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da = g.iter().zip(self.data(*b)).map(|(gi, y)| gi * y).collect();
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let db = g.iter().zip(self.data(*a)).map(|(gi, x)| gi * x).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { a, c } => {
                if self.requires(*a) {
                    self.accumulate(*a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.data(*s)[0];
                if self.requires(*a) {
                    self.accumulate(*a, g.iter().map(|x| x * sv).collect());
                }
                if self.requires(*s) {
                    let ds: f64 = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).sum();
                    self.accumulate(*s, vec![ds]);
                }
            }
            Op::Relu { a } => {
                if self.requires(*a) {
                    let ad = self.data(*a);
                    let da = g
                        .iter()
                        .zip(ad)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(*a, da);
                }
            }
            Op::SoftmaxLastDim { a } => {
                if self.requires(*a) {
                    let last = *self.shape(out).last().unwrap();
                    let y = self.data(out);
                    let mut da = vec![0.0; y.len()];
                    for (row, (yrow, grow)) in
                        y.chunks(last).zip(g.chunks(last)).enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..last {
                            da[row * last + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(*a, da);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gamma).to_vec();
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var =
                        xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = grow.iter().zip(&gd).map(|(gi, gm)| gi * gm).collect();
                    let mean_gy = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.requires(*x) {
                    self.accumulate(*x, dx);
                }
                if self.requires(*gamma) {
                    self.accumulate(*gamma, dgamma);
                }
                if self.requires(*beta) {
                    self.accumulate(*beta, dbeta);
                }
            }
            Op::MeanPoolRows { x } => {
                if self.requires(*x) {
                    let (l, d) = shape2(self.node(*x)).unwrap();
                    let mut dx = vec![0.0; l * d];
                    for i in 0..l {
                        for j in 0..d {
                            dx[i * d + j] = g[j] / l as f64;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires(*x) {
                    let (l, d) = shape2(self.node(*x)).unwrap();
                    let mut dx = vec![0.0; l * d];
                    dx[start * d..start * d + g.len()].copy_from_slice(g);
                    self.accumulate(*x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires(*x) {
                    let (l, d) = shape2(self.node(*x)).unwrap();
                    let w = self.shape(out)[1];
                    let mut dx = vec![0.0; l * d];
                    for i in 0..l {
                        for j in 0..w {
                            dx[i * d + start + j] = g[i * w + j];
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.node(p).numel();
                    if self.requires(p) {
                        self.accumulate(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let (l, total) = shape2(self.node(out)).unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, w) = shape2(self.node(p)).unwrap();
                    if self.requires(p) {
                        let mut dp = vec![0.0; l * w];
                        for i in 0..l {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        self.accumulate(p, dp);
                    }
                    col += w;
                }
            }
            Op::Transpose { x } => {
                if self.requires(*x) {
                    let (r, c) = shape2(self.node(*x)).unwrap();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = g[i * r + j];
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Sum { a } => {
                if self.requires(*a) {
                    let n = self.node(*a).numel();
                    self.accumulate(*a, vec![g[0]; n]);
                }
            }
            Op::Mean { a } => {
                if self.requires(*a) {
                    let n = self.node(*a).numel();
                    self.accumulate(*a, vec![g[0] / n as f64; n]);
                }
            }
            Op::AddRowVec { x, b } => {
                if self.requires(*x) {
                    self.accumulate(*x, g.to_vec());
                }
                if self.requires(*b) {
                    let d = self.node(*b).numel();
                    let mut db = vec![0.0; d];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if self.requires(*logits) {
                    let (l, v) = shape2(self.node(*logits)).unwrap();
                    let xd = self.data(*logits);
                    let n_valid = targets.iter().filter(|&&t| t >= 0).count() as f64;
                    let scale = g[0] / n_valid;
                    let mut dl = vec![0.0; l * v];
                    for (i, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let row = &xd[i * v..(i + 1) * v];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - m).exp() / z;
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            dl[i * v + j] = scale * (p - onehot);
                        }
                    }
                    self.accumulate(*logits, dl);
                }
            }
            Op::CosineSim { a, b } => {
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                let na: f64 = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return; // defined as 0 with zero gradient
                }
                let c = self.data(out)[0];
                let g0 = g[0];
                if self.requires(*a) {
                    let da = ad
                        .iter()
                        .zip(&bd)
                        .map(|(ai, bi)| g0 * (bi / (na * nb) - c * ai / (na * na)))
                        .collect();
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let db = bd
                        .iter()
                        .zip(&ad)
                        .map(|(bi, ai)| g0 * (ai / (na * nb) - c * bi / (nb * nb)))
                        .collect();
                    self.accumulate(*b, db);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.requires(*table) {
                    let (rows, d) = shape2(self.node(*table)).unwrap();
                    let mut dt = vec![0.0; rows * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                    self.accumulate(*table, dt);
                }
            }
            Op::Index { v, i } => {
                if self.requires(*v) {
                    let n = self.node(*v).numel();
                    let mut dv = vec![0.0; n];
                    dv[*i] = g[0];
                    self.accumulate(*v, dv);
                }
            }
            #[cfg(test)]
            Op::ReluWrongGrad { a } => {
                if self.requires(*a) {
                    self.accumulate(*a, g.to_vec());
                }
            }
        }
    }

    /// Collect gradients for named bindings. Bound parameters that never
    /// received gradient (off the loss path) get explicit zero entries.
    pub fn gradient_map(&self, bindings: &[(String, NodeId)]) -> GradientMap {
        let mut map = GradientMap::default();
        for (name, id) in bindings {
            let node = self.node(*id);
            let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.numel()]);
            map.entries
                .insert(name.clone(), ParamTensor::new(node.shape.clone(), data));
        }
        map
    }
}
