//! Reverse-mode differentiation over an explicit tape.
//!
//! Every kernel the model needs is a tape op with a hand-derived adjoint:
//! one-hot gathers/scatters for the sparse triple matrices, Hadamard,
//! stable softmax, eps-guarded L2 normalization, dense mat-vec products
//! and the handful of pointwise/reduction ops the encoder and decoder
//! compose from. A tape records one forward pass and is consumed by
//! exactly one backward pass; adjoints are replayed in reverse execution
//! order.

use crate::kg::OneHotRows;
use crate::{Error, Result, Scalar};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Named parameter block (vector or row-major matrix).
#[derive(Debug, Clone)]
pub struct ParamBlock<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamBlock<S> {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered collection of parameter blocks; block order is the canonical
/// serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    blocks: Vec<ParamBlock<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { blocks: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add_block(&mut self, name: &str, rows: usize, cols: usize, data: Vec<S>) -> usize {
        assert_eq!(data.len(), rows * cols, "block {name} shape/data mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate block {name}");
        let id = self.blocks.len();
        self.by_name.insert(name.to_string(), id);
        self.blocks.push(ParamBlock { name: name.to_string(), rows, cols, data });
        id
    }

    pub fn id(&self, name: &str) -> usize {
        *self.by_name.get(name).unwrap_or_else(|| panic!("unknown block {name}"))
    }

    pub fn block(&self, id: usize) -> &ParamBlock<S> {
        &self.blocks[id]
    }

    pub fn block_mut(&mut self, id: usize) -> &mut ParamBlock<S> {
        &mut self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParamBlock<S>] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Gradient accumulator mirroring a [`ParamStore`] block for block.
#[derive(Debug, Clone)]
pub struct GradStore<S> {
    pub data: Vec<Vec<S>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self { data: store.blocks.iter().map(|b| vec![S::zero(); b.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for block in &mut self.data {
            for g in block.iter_mut() {
                *g = S::zero();
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for block in &mut self.data {
            for g in block.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        let mut sq = S::zero();
        for block in &self.data {
            for &g in block {
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    pub fn add_from(&mut self, other: &GradStore<S>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

enum Op<S> {
    Leaf { param: Option<usize> },
    Gather { m: Arc<Vec<u32>>, x: ValueId },
    Scatter { m: Arc<Vec<u32>>, x: ValueId },
    Hadamard(ValueId, ValueId),
    Add(ValueId, ValueId),
    AddN(Vec<ValueId>),
    Scale(ValueId, S),
    Softmax(ValueId),
    NormalizeEps { x: ValueId, eps: S },
    MatVec { w: ValueId, x: ValueId },
    MatTVec { w: ValueId, x: ValueId },
    Tanh(ValueId),
    Sigmoid(ValueId),
    OneMinus(ValueId),
    Dot(ValueId, ValueId),
    Slice { x: ValueId, start: usize },
    MeanRows { table: ValueId, idxs: Arc<Vec<u32>>, divisor: usize },
    Row { table: ValueId, idx: usize },
    EntryScale { v: ValueId, w: ValueId, idx: usize },
    WeightedSum { coeffs: ValueId, parts: Vec<ValueId> },
    ConcatScalars(Vec<ValueId>),
    PoolRows { table: ValueId, groups: Arc<Vec<Vec<u32>>>, divisor: usize },
    CrossEntropy { logits: ValueId, target: usize },
    NegLogEntry { x: ValueId, idx: usize },
}

struct Node<S> {
    value: Vec<S>,
    grad: Vec<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
}

/// Record of one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_values<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].grad
    }

    /// Shape as (rows, cols); vectors are (len, 1).
    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, value: Vec<S>, rows: usize, cols: usize, op: Op<S>) -> ValueId {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![S::zero(); value.len()];
        self.nodes.push(Node { value, grad, rows, cols, op });
        ValueId(self.nodes.len() - 1)
    }

    fn vec_len(&self, id: ValueId, what: &str) -> Result<usize> {
        let n = &self.nodes[id.0];
        if n.cols != 1 {
            return Err(Error::DimMismatch(format!("{what}: expected vector, got {}x{}", n.rows, n.cols)));
        }
        Ok(n.rows)
    }

    /// Constant vector leaf (no gradient destination).
    pub fn leaf(&mut self, value: Vec<S>) -> ValueId {
        let rows = value.len();
        self.push(value, rows, 1, Op::Leaf { param: None })
    }

    /// Constant matrix leaf.
    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, value: Vec<S>) -> ValueId {
        assert_eq!(value.len(), rows * cols);
        self.push(value, rows, cols, Op::Leaf { param: None })
    }

    /// Leaf bound to a parameter block; its gradient is collected by
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, block_id: usize) -> ValueId {
        let b = store.block(block_id);
        self.push(b.data.clone(), b.rows, b.cols, Op::Leaf { param: Some(block_id) })
    }

    /// `M v` for a one-hot-rows matrix: a row gather.
    pub fn sp_apply(&mut self, m: &OneHotRows, x: ValueId) -> Result<ValueId> {
        let n = self.vec_len(x, "sp_apply")?;
        if n != m.n_cols {
            return Err(Error::DimMismatch(format!("sp_apply: matrix has {} columns, vector has {n}", m.n_cols)));
        }
        let xv = &self.nodes[x.0].value;
        let out: Vec<S> = m.cols.iter().map(|&c| xv[c as usize]).collect();
        let rows = out.len();
        Ok(self.push(out, rows, 1, Op::Gather { m: m.cols.clone(), x }))
    }

    /// `Mᵀ v` for a one-hot-rows matrix: a scatter-add.
    pub fn sp_apply_transpose(&mut self, m: &OneHotRows, x: ValueId) -> Result<ValueId> {
        let n = self.vec_len(x, "sp_apply_transpose")?;
        if n != m.n_rows() {
            return Err(Error::DimMismatch(format!(
                "sp_apply_transpose: matrix has {} rows, vector has {n}",
                m.n_rows()
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); m.n_cols];
        for (k, &c) in m.cols.iter().enumerate() {
            out[c as usize] += xv[k];
        }
        let rows = out.len();
        Ok(self.push(out, rows, 1, Op::Scatter { m: m.cols.clone(), x }))
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::DimMismatch(format!("hadamard: {ra}x{ca} vs {rb}x{cb}")));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(out, ra, ca, Op::Hadamard(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::DimMismatch(format!("add: {ra}x{ca} vs {rb}x{cb}")));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(out, ra, ca, Op::Add(a, b)))
    }

    pub fn add_n(&mut self, terms: &[ValueId]) -> Result<ValueId> {
        let first = *terms.first().ok_or_else(|| Error::DimMismatch("add_n: no terms".into()))?;
        let (r, c) = self.shape(first);
        let mut out = vec![S::zero(); r * c];
        for &t in terms {
            if self.shape(t) != (r, c) {
                return Err(Error::DimMismatch("add_n: mixed shapes".into()));
            }
            for (o, &v) in out.iter_mut().zip(&self.nodes[t.0].value) {
                *o += v;
            }
        }
        Ok(self.push(out, r, c, Op::AddN(terms.to_vec())))
    }

    pub fn scale(&mut self, x: ValueId, factor: S) -> ValueId {
        let (r, c) = self.shape(x);
        let out: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v * factor).collect();
        self.push(out, r, c, Op::Scale(x, factor))
    }

    /// Max-shifted stable softmax over a vector.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.vec_len(x, "softmax")?;
        let xv = &self.nodes[x.0].value;
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let out = softmax_values(xv);
        Ok(self.push(out, n, 1, Op::Softmax(x)))
    }

    /// `v / (||v||_2 + eps)`; the zero vector maps to the zero vector.
    pub fn normalize_eps(&mut self, x: ValueId, eps: S) -> Result<ValueId> {
        if eps <= S::zero() {
            return Err(Error::BadConfig("normalize_eps: eps must be positive".into()));
        }
        let n = self.vec_len(x, "normalize_eps")?;
        let xv = &self.nodes[x.0].value;
        let norm = xv.iter().map(|&v| v * v).sum::<S>().sqrt();
        let denom = norm + eps;
        let out: Vec<S> = xv.iter().map(|&v| v / denom).collect();
        Ok(self.push(out, n, 1, Op::NormalizeEps { x, eps }))
    }

    /// Dense `W x` with `W` a matrix node.
    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.shape(w);
        let n = self.vec_len(x, "matvec")?;
        if n != c {
            return Err(Error::DimMismatch(format!("matvec: {r}x{c} times vector of {n}")));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); r];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * c..(i + 1) * c];
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(xv) {
                acc += *a * *b;
            }
            *o = acc;
        }
        Ok(self.push(out, r, 1, Op::MatVec { w, x }))
    }

    /// Dense `Wᵀ x`.
    pub fn matvec_t(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.shape(w);
        let n = self.vec_len(x, "matvec_t")?;
        if n != r {
            return Err(Error::DimMismatch(format!("matvec_t: ({r}x{c})ᵀ times vector of {n}")));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            let xi = xv[i];
            let row = &wv[i * c..(i + 1) * c];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        Ok(self.push(out, c, 1, Op::MatTVec { w, x }))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.shape(x);
        let out: Vec<S> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(out, r, c, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.shape(x);
        let one = S::one();
        let out: Vec<S> = self.nodes[x.0].value.iter().map(|&v| one / (one + (-v).exp())).collect();
        self.push(out, r, c, Op::Sigmoid(x))
    }

    pub fn one_minus(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.shape(x);
        let one = S::one();
        let out: Vec<S> = self.nodes[x.0].value.iter().map(|&v| one - v).collect();
        self.push(out, r, c, Op::OneMinus(x))
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let na = self.vec_len(a, "dot")?;
        let nb = self.vec_len(b, "dot")?;
        if na != nb {
            return Err(Error::DimMismatch(format!("dot: {na} vs {nb}")));
        }
        let mut acc = S::zero();
        for (&x, &y) in self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value) {
            acc += x * y;
        }
        Ok(self.push(vec![acc], 1, 1, Op::Dot(a, b)))
    }

    pub fn slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let n = self.vec_len(x, "slice")?;
        if start + len > n {
            return Err(Error::DimMismatch(format!("slice: [{start}, {}) out of vector of {n}", start + len)));
        }
        let out = self.nodes[x.0].value[start..start + len].to_vec();
        Ok(self.push(out, len, 1, Op::Slice { x, start }))
    }

    /// Mean of selected table rows with a fixed divisor.
    pub fn mean_rows(&mut self, table: ValueId, idxs: Arc<Vec<u32>>, divisor: usize) -> Result<ValueId> {
        let (r, c) = self.shape(table);
        if idxs.is_empty() || divisor == 0 {
            return Err(Error::DimMismatch("mean_rows: empty selection".into()));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = vec![S::zero(); c];
        for &i in idxs.iter() {
            let i = i as usize;
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, bound: r });
            }
            for (o, &v) in out.iter_mut().zip(&tv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = S::one() / S::from_f64(divisor as f64);
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(self.push(out, c, 1, Op::MeanRows { table, idxs, divisor }))
    }

    /// Single table row as a vector.
    pub fn row(&mut self, table: ValueId, idx: usize) -> Result<ValueId> {
        let (r, c) = self.shape(table);
        if idx >= r {
            return Err(Error::IndexOutOfRange { index: idx, bound: r });
        }
        let out = self.nodes[table.0].value[idx * c..(idx + 1) * c].to_vec();
        Ok(self.push(out, c, 1, Op::Row { table, idx }))
    }

    /// `w[idx] * v` where the scaling weight is itself differentiable.
    pub fn entry_scale(&mut self, v: ValueId, w: ValueId, idx: usize) -> Result<ValueId> {
        let (r, c) = self.shape(v);
        let nw = self.vec_len(w, "entry_scale")?;
        if idx >= nw {
            return Err(Error::IndexOutOfRange { index: idx, bound: nw });
        }
        let factor = self.nodes[w.0].value[idx];
        let out: Vec<S> = self.nodes[v.0].value.iter().map(|&x| x * factor).collect();
        Ok(self.push(out, r, c, Op::EntryScale { v, w, idx }))
    }

    /// `sum_i coeffs[i] * parts[i]`, differentiable in both.
    pub fn weighted_sum(&mut self, coeffs: ValueId, parts: &[ValueId]) -> Result<ValueId> {
        let nc = self.vec_len(coeffs, "weighted_sum")?;
        if nc != parts.len() {
            return Err(Error::DimMismatch(format!("weighted_sum: {nc} coeffs for {} parts", parts.len())));
        }
        let first = *parts.first().ok_or_else(|| Error::DimMismatch("weighted_sum: no parts".into()))?;
        let (r, c) = self.shape(first);
        let mut out = vec![S::zero(); r * c];
        for (i, &p) in parts.iter().enumerate() {
            if self.shape(p) != (r, c) {
                return Err(Error::DimMismatch("weighted_sum: mixed part shapes".into()));
            }
            let w = self.nodes[coeffs.0].value[i];
            for (o, &v) in out.iter_mut().zip(&self.nodes[p.0].value) {
                *o += w * v;
            }
        }
        Ok(self.push(out, r, c, Op::WeightedSum { coeffs, parts: parts.to_vec() }))
    }

    /// Stack scalar nodes into one vector.
    pub fn concat_scalars(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p) != (1, 1) {
                return Err(Error::DimMismatch("concat_scalars: non-scalar part".into()));
            }
            out.push(self.nodes[p.0].value[0]);
        }
        let rows = out.len();
        Ok(self.push(out, rows, 1, Op::ConcatScalars(parts.to_vec())))
    }

    /// Matrix whose row `g` is the mean of the table rows in `groups[g]`,
    /// divided by the fixed `divisor` (padding counts toward the mean).
    pub fn pool_rows(&mut self, table: ValueId, groups: Arc<Vec<Vec<u32>>>, divisor: usize) -> Result<ValueId> {
        let (r, c) = self.shape(table);
        if divisor == 0 {
            return Err(Error::DimMismatch("pool_rows: zero divisor".into()));
        }
        let tv = &self.nodes[table.0].value;
        let n_groups = groups.len();
        let mut out = vec![S::zero(); n_groups * c];
        let inv = S::one() / S::from_f64(divisor as f64);
        for (g, idxs) in groups.iter().enumerate() {
            let dst = &mut out[g * c..(g + 1) * c];
            for &i in idxs {
                let i = i as usize;
                if i >= r {
                    return Err(Error::IndexOutOfRange { index: i, bound: r });
                }
                for (o, &v) in dst.iter_mut().zip(&tv[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(out, n_groups, c, Op::PoolRows { table, groups, divisor }))
    }

    /// `logsumexp(logits) - logits[target]`, the per-token cross-entropy.
    pub fn cross_entropy(&mut self, logits: ValueId, target: usize) -> Result<ValueId> {
        let n = self.vec_len(logits, "cross_entropy")?;
        if target >= n {
            return Err(Error::IndexOutOfRange { index: target, bound: n });
        }
        let lv = &self.nodes[logits.0].value;
        let max = lv.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = max + lv.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        let loss = lse - lv[target];
        Ok(self.push(vec![loss], 1, 1, Op::CrossEntropy { logits, target }))
    }

    /// `-ln(x[idx])` for a probability vector entry.
    pub fn neg_log_entry(&mut self, x: ValueId, idx: usize) -> Result<ValueId> {
        let n = self.vec_len(x, "neg_log_entry")?;
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, bound: n });
        }
        let v = self.nodes[x.0].value[idx];
        Ok(self.push(vec![-(v.ln())], 1, 1, Op::NegLogEntry { x, idx }))
    }

    /// Propagate adjoints from a scalar root back to every leaf. Consumes
    /// the tape's single backward budget.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::BadConfig("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::DimMismatch("backward: root must be scalar".into()));
        }
        if !self.nodes[root.0].value[0].is_finite() {
            return Err(Error::NonFinite("backward: loss is not finite".into()));
        }
        self.nodes[root.0].grad[0] = S::one();

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|g| *g == S::zero()) {
                continue;
            }
            let g = &node.grad;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Gather { m, x } => {
                    let xg = &mut before[x.0].grad;
                    for (k, &c) in m.iter().enumerate() {
                        xg[c as usize] += g[k];
                    }
                }
                Op::Scatter { m, x } => {
                    let xg = &mut before[x.0].grad;
                    for (k, &c) in m.iter().enumerate() {
                        xg[k] += g[c as usize];
                    }
                }
                Op::Hadamard(a, b) => {
                    if a.0 == b.0 {
                        let two = S::from_f64(2.0);
                        let av: Vec<S> = before[a.0].value.clone();
                        let ag = &mut before[a.0].grad;
                        for k in 0..g.len() {
                            ag[k] += two * g[k] * av[k];
                        }
                    } else {
                        let (lo, hi) = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
                        let (left, right) = before.split_at_mut(hi);
                        let (anode, bnode): (&mut Node<S>, &mut Node<S>) = if a.0 < b.0 {
                            (&mut left[lo], &mut right[0])
                        } else {
                            (&mut right[0], &mut left[lo])
                        };
                        for k in 0..g.len() {
                            anode.grad[k] += g[k] * bnode.value[k];
                            bnode.grad[k] += g[k] * anode.value[k];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (k, &gk) in g.iter().enumerate() {
                        before[a.0].grad[k] += gk;
                    }
                    for (k, &gk) in g.iter().enumerate() {
                        before[b.0].grad[k] += gk;
                    }
                }
                Op::AddN(terms) => {
                    for &t in terms {
                        for (k, &gk) in g.iter().enumerate() {
                            before[t.0].grad[k] += gk;
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    for (k, &gk) in g.iter().enumerate() {
                        before[x.0].grad[k] += gk * f;
                    }
                }
                Op::Softmax(x) => {
                    // dL/dx = p ⊙ (g - <g, p>)
                    let p = &node.value;
                    let mut gp = S::zero();
                    for (gk, pk) in g.iter().zip(p) {
                        gp += *gk * *pk;
                    }
                    let xg = &mut before[x.0].grad;
                    for k in 0..g.len() {
                        xg[k] += p[k] * (g[k] - gp);
                    }
                }
                Op::NormalizeEps { x, eps } => {
                    let xnode = &mut before[x.0];
                    let norm = xnode.value.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let denom = norm + *eps;
                    if norm > S::zero() {
                        let mut xg_dot = S::zero();
                        for (gk, xv) in g.iter().zip(&xnode.value) {
                            xg_dot += *gk * *xv;
                        }
                        let coef = xg_dot / (norm * denom * denom);
                        for k in 0..g.len() {
                            xnode.grad[k] += g[k] / denom - xnode.value[k] * coef;
                        }
                    }
                    // norm == 0: gradient defined as zero.
                }
                Op::MatVec { w, x } => {
                    let c = before[x.0].value.len();
                    let xv: Vec<S> = before[x.0].value.clone();
                    {
                        let wg = &mut before[w.0].grad;
                        for (i, &gi) in g.iter().enumerate() {
                            if gi == S::zero() {
                                continue;
                            }
                            let dst = &mut wg[i * c..(i + 1) * c];
                            for (d, &xk) in dst.iter_mut().zip(&xv) {
                                *d += gi * xk;
                            }
                        }
                    }
                    let wv: Vec<S> = before[w.0].value.clone();
                    let xg = &mut before[x.0].grad;
                    for (i, &gi) in g.iter().enumerate() {
                        if gi == S::zero() {
                            continue;
                        }
                        let row = &wv[i * c..(i + 1) * c];
                        for (xk, &a) in xg.iter_mut().zip(row) {
                            *xk += gi * a;
                        }
                    }
                }
                Op::MatTVec { w, x } => {
                    // out = Wᵀ x; dW += x gᵀ, dx += W g
                    let (r, c) = (before[w.0].rows, before[w.0].cols);
                    let xv: Vec<S> = before[x.0].value.clone();
                    {
                        let wg = &mut before[w.0].grad;
                        for i in 0..r {
                            let xi = xv[i];
                            if xi == S::zero() {
                                continue;
                            }
                            let dst = &mut wg[i * c..(i + 1) * c];
                            for (d, &gk) in dst.iter_mut().zip(g) {
                                *d += xi * gk;
                            }
                        }
                    }
                    let wv: Vec<S> = before[w.0].value.clone();
                    let xg = &mut before[x.0].grad;
                    for (i, xk) in xg.iter_mut().enumerate() {
                        let row = &wv[i * c..(i + 1) * c];
                        let mut acc = S::zero();
                        for (&a, &gk) in row.iter().zip(g) {
                            acc += a * gk;
                        }
                        *xk += acc;
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let xg = &mut before[x.0].grad;
                    for k in 0..g.len() {
                        xg[k] += g[k] * (S::one() - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let xg = &mut before[x.0].grad;
                    for k in 0..g.len() {
                        xg[k] += g[k] * y[k] * (S::one() - y[k]);
                    }
                }
                Op::OneMinus(x) => {
                    let xg = &mut before[x.0].grad;
                    for k in 0..g.len() {
                        xg[k] -= g[k];
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    if a.0 == b.0 {
                        let av: Vec<S> = before[a.0].value.clone();
                        let ag = &mut before[a.0].grad;
                        let two = S::from_f64(2.0);
                        for (x, &v) in ag.iter_mut().zip(&av) {
                            *x += two * gs * v;
                        }
                    } else {
                        let bv: Vec<S> = before[b.0].value.clone();
                        for (k, &v) in bv.iter().enumerate() {
                            before[a.0].grad[k] += gs * v;
                        }
                        let av: Vec<S> = before[a.0].value.clone();
                        for (k, &v) in av.iter().enumerate() {
                            before[b.0].grad[k] += gs * v;
                        }
                    }
                }
                Op::Slice { x, start } => {
                    let xg = &mut before[x.0].grad;
                    for (k, &gk) in g.iter().enumerate() {
                        xg[start + k] += gk;
                    }
                }
                Op::MeanRows { table, idxs, divisor } => {
                    let c = before[table.0].cols;
                    let inv = S::one() / S::from_f64(*divisor as f64);
                    let tg = &mut before[table.0].grad;
                    for &i in idxs.iter() {
                        let dst = &mut tg[i as usize * c..(i as usize + 1) * c];
                        for (d, &gk) in dst.iter_mut().zip(g) {
                            *d += gk * inv;
                        }
                    }
                }
                Op::Row { table, idx } => {
                    let c = before[table.0].cols;
                    let dst = &mut before[table.0].grad[idx * c..(idx + 1) * c];
                    for (d, &gk) in dst.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
                Op::EntryScale { v, w, idx } => {
                    let factor = before[w.0].value[*idx];
                    let vv: Vec<S> = before[v.0].value.clone();
                    {
                        let vg = &mut before[v.0].grad;
                        for (k, &gk) in g.iter().enumerate() {
                            vg[k] += gk * factor;
                        }
                    }
                    let mut acc = S::zero();
                    for (&gk, &vk) in g.iter().zip(&vv) {
                        acc += gk * vk;
                    }
                    before[w.0].grad[*idx] += acc;
                }
                Op::WeightedSum { coeffs, parts } => {
                    let cv: Vec<S> = before[coeffs.0].value.clone();
                    for (i, &p) in parts.iter().enumerate() {
                        let w = cv[i];
                        let mut acc = S::zero();
                        {
                            let pnode = &mut before[p.0];
                            for (k, &gk) in g.iter().enumerate() {
                                pnode.grad[k] += gk * w;
                                acc += gk * pnode.value[k];
                            }
                        }
                        before[coeffs.0].grad[i] += acc;
                    }
                }
                Op::ConcatScalars(parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        before[p.0].grad[0] += g[k];
                    }
                }
                Op::PoolRows { table, groups, divisor } => {
                    let c = before[table.0].cols;
                    let inv = S::one() / S::from_f64(*divisor as f64);
                    let tg = &mut before[table.0].grad;
                    for (gi, idxs) in groups.iter().enumerate() {
                        let gr = &g[gi * c..(gi + 1) * c];
                        for &i in idxs {
                            let dst = &mut tg[i as usize * c..(i as usize + 1) * c];
                            for (d, &gk) in dst.iter_mut().zip(gr) {
                                *d += gk * inv;
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let gs = g[0];
                    let lnode = &mut before[logits.0];
                    let probs = softmax_values(&lnode.value);
                    for (k, &p) in probs.iter().enumerate() {
                        lnode.grad[k] += gs * p;
                    }
                    lnode.grad[*target] -= gs;
                }
                Op::NegLogEntry { x, idx } => {
                    let xnode = &mut before[x.0];
                    xnode.grad[*idx] -= g[0] / xnode.value[*idx];
                }
            }
        }
        Ok(())
    }

    /// Sum leaf gradients into the per-block gradient accumulator.
    pub fn accumulate_param_grads(&self, grads: &mut GradStore<S>) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(b) } = node.op {
                for (dst, &g) in grads.data[b].iter_mut().zip(&node.grad) {
                    *dst += g;
                }
            }
        }
    }
}

/// Central-difference gradient check of a scalar-valued program against
/// the tape's analytic gradients.
///
/// Returns per-block maximum relative error, with relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_blocks<S, F>(program: F, params: &ParamStore<S>, h: S) -> crate::Result<Vec<(String, S)>>
where
    S: Scalar,
    F: Fn(&ParamStore<S>, &mut Tape<S>) -> crate::Result<ValueId>,
{
    if h <= S::zero() {
        return Err(Error::BadConfig("grad_check: h must be positive".into()));
    }
    let mut tape = Tape::new();
    let root = program(params, &mut tape)?;
    if !tape.value(root)[0].is_finite() {
        return Err(Error::NonFinite("grad_check: program value".into()));
    }
    tape.backward(root)?;
    let mut analytic = GradStore::zeros_like(params);
    tape.accumulate_param_grads(&mut analytic);

    let eval = |p: &ParamStore<S>| -> crate::Result<S> {
        let mut t = Tape::new();
        let r = program(p, &mut t)?;
        let v = t.value(r)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check: perturbed program value".into()));
        }
        Ok(v)
    };

    let floor = S::from_f64(1e-8);
    let two = S::from_f64(2.0);
    let mut out = Vec::new();
    let mut work = params.clone();
    for b in 0..params.n_blocks() {
        let mut max_err = S::zero();
        for i in 0..params.block(b).len() {
            let orig = params.block(b).data[i];
            work.block_mut(b).data[i] = orig + h;
            let plus = eval(&work)?;
            work.block_mut(b).data[i] = orig - h;
            let minus = eval(&work)?;
            work.block_mut(b).data[i] = orig;
            let numeric = (plus - minus) / (two * h);
            let a = analytic.data[b][i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
        out.push((params.block(b).name.clone(), max_err));
    }
    Ok(out)
}

/// Maximum relative error over all parameter coordinates.
pub fn grad_check<S, F>(program: F, params: &ParamStore<S>, h: S) -> crate::Result<S>
where
    S: Scalar,
    F: Fn(&ParamStore<S>, &mut Tape<S>) -> crate::Result<ValueId>,
{
    let blocks = grad_check_blocks(program, params, h)?;
    Ok(blocks.into_iter().map(|(_, e)| e).fold(S::zero(), S::max))
}
