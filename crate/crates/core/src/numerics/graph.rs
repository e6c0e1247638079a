//! Reverse-mode differentiation over a small, fixed operation set.
//!
//! A [`Graph`] is built eagerly: every op computes its value on insertion and
//! records how to route gradients back. Node ids grow monotonically, so the
//! reverse id order is a topological order and backward accumulation is
//! deterministic.
//!
//! Shape misuse is a programming error and panics. Non-finite values are
//! recorded as the graph's first fault and reported by [`Graph::backward`]
//! and [`Graph::check`].

use std::collections::BTreeMap;

use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::Scalar;
use crate::error::{Error, Result};

#[cfg(test)]
thread_local! {
    /// Factor applied to the GELU backward rule, for checking the checker.
    pub(crate) static GELU_GRAD_FAULT: std::cell::Cell<f64> = const { std::cell::Cell::new(1.0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    MulRow { a: NodeId, row: NodeId },
    Scale(NodeId, F),
    Softmax(NodeId),
    RmsNorm { a: NodeId, inv_rms: Vec<F> },
    Gather { table: NodeId, ids: Vec<u32> },
    Slice { a: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Mean { a: NodeId, axis: usize },
    MeanOf(Vec<NodeId>),
    Gelu(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<Option<u32>>, probs: Vec<F>, nll: Vec<F> },
    Sum(NodeId),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow { .. } => "mul_row",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::MeanOf(..) => "mean_of",
            Op::Gelu(..) => "gelu",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
    param: Option<ParamId>,
}

/// First non-finite value observed while building a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub op: &'static str,
    pub node: usize,
}

#[derive(Debug, Clone)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
    fault: Option<Fault>,
    rms_eps: F,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root, keyed by leaf node and by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    leaves: BTreeMap<NodeId, Vec<F>>,
    params: BTreeMap<ParamId, Vec<F>>,
}

impl<F> Gradients<F> {
    pub fn node(&self, id: NodeId) -> Option<&[F]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Vec<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<F>> {
        self.params
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        _ => panic!("expected a 2-D tensor, got shape {shape:?}"),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            fault: None,
            rms_eps: F::of(1e-6),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = NodeId(self.nodes.len());
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some(Fault { op: op.name(), node: id.0 });
        }
        self.nodes.push(Node { shape, value, requires_grad, op, param: None });
        id
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    pub fn fault(&self) -> Option<&Fault> {
        self.fault.as_ref()
    }

    /// Fails with a numeric-fault error if any value so far is non-finite.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(f) => Err(Error::NumericFault { op: f.op.to_string(), context: Some(format!("node {}", f.node)) }),
            None => Ok(()),
        }
    }

    /// Per-position negative log-likelihoods recorded by a cross-entropy node
    /// (zero at masked positions).
    pub fn token_nll(&self, id: NodeId) -> &[F] {
        match &self.nodes[id.0].op {
            Op::CrossEntropy { nll, .. } => nll,
            _ => panic!("node {} is not a cross-entropy node", id.0),
        }
    }

    // ---- leaves --------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf shape/data mismatch");
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> NodeId {
        self.leaf(shape, data, false)
    }

    /// Leaf holding a parameter's current value; repeated calls return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.leaf(p.shape.clone(), p.data.clone(), p.trainable);
        self.nodes[n.0].param = Some(id);
        self.param_nodes.insert(id, n);
        n
    }

    // ---- ops -----------------------------------------------------------

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatMul { a, b, trans_b: false })
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = rows_cols(self.shape(a));
        let (n, k2) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = rows_cols(self.shape(a));
        assert_eq!(self.value(row).len(), n, "add_row width mismatch");
        let r = self.value(row);
        let out: Vec<F> = self.value(a).chunks(n).flat_map(|c| c.iter().zip(r).map(|(x, y)| *x + *y)).collect();
        let rg = self.rg(&[a, row]);
        self.push(self.shape(a).to_vec(), out, rg, Op::AddRow { a, row })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b))
    }

    /// Multiplies every row of an `[m,n]` tensor element-wise by a length-`n` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = rows_cols(self.shape(a));
        assert_eq!(self.value(row).len(), n, "mul_row width mismatch");
        let r = self.value(row);
        let out: Vec<F> = self.value(a).chunks(n).flat_map(|c| c.iter().zip(r).map(|(x, y)| *x * *y)).collect();
        let rg = self.rg(&[a, row]);
        self.push(self.shape(a).to_vec(), out, rg, Op::MulRow { a, row })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let out: Vec<F> = self.value(a).iter().map(|x| *x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    /// Row-wise softmax; with `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let (m, n) = rows_cols(self.shape(a));
        if causal {
            assert!(m <= n, "causal softmax needs at least as many columns as rows");
        }
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let limit = if causal { i + 1 } else { n };
            kernels::softmax_row(row, limit);
        }
        let rg = self.rg(&[a]);
        self.push(vec![m, n], out, rg, Op::Softmax(a))
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        let (m, n) = rows_cols(self.shape(a));
        let x = self.value(a);
        let mut out = vec![F::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let ms = dot(row, row) / F::of(n as f64);
            let r = F::one() / (ms + self.rms_eps).sqrt();
            inv_rms.push(r);
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = *v * r;
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![m, n], out, rg, Op::RmsNorm { a, inv_rms })
    }

    /// Rows of a `[V,d]` table selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (v, d) = rows_cols(self.shape(table));
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "gather index {id} out of range for table of {v} rows");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let (m, n) = rows_cols(self.shape(a));
        let x = self.value(a);
        let (shape, out) = match axis {
            0 => {
                assert!(start + len <= m, "row slice out of range");
                (vec![len, n], x[start * n..(start + len) * n].to_vec())
            }
            1 => {
                assert!(start + len <= n, "column slice out of range");
                let mut out = Vec::with_capacity(m * len);
                for r in x.chunks(n) {
                    out.extend_from_slice(&r[start..start + len]);
                }
                (vec![m, len], out)
            }
            _ => panic!("slice axis must be 0 or 1"),
        };
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Slice { a, axis, start })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let shapes: Vec<(usize, usize)> = parts.iter().map(|p| rows_cols(self.shape(*p))).collect();
        let (shape, out) = match axis {
            0 => {
                let n = shapes[0].1;
                assert!(shapes.iter().all(|s| s.1 == n), "row concat width mismatch");
                let m: usize = shapes.iter().map(|s| s.0).sum();
                let mut out = Vec::with_capacity(m * n);
                for p in parts {
                    out.extend_from_slice(self.value(*p));
                }
                (vec![m, n], out)
            }
            1 => {
                let m = shapes[0].0;
                assert!(shapes.iter().all(|s| s.0 == m), "column concat height mismatch");
                let n: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for (p, s) in parts.iter().zip(&shapes) {
                        out.extend_from_slice(&self.value(*p)[i * s.1..(i + 1) * s.1]);
                    }
                }
                (vec![m, n], out)
            }
            _ => panic!("concat axis must be 0 or 1"),
        };
        let rg = self.rg(parts);
        self.push(shape, out, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Mean over one axis of a 2-D tensor; the reduced axis keeps size 1.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> NodeId {
        let (m, n) = rows_cols(self.shape(a));
        let x = self.value(a);
        let (shape, out) = match axis {
            0 => {
                let mut acc = vec![0f64; n];
                for r in x.chunks(n) {
                    for (s, v) in acc.iter_mut().zip(r) {
                        *s += v.as_f64();
                    }
                }
                (vec![1, n], acc.into_iter().map(|s| F::of(s / m as f64)).collect())
            }
            1 => (
                vec![m, 1],
                x.chunks(n).map(|r| F::of(r.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64)).collect(),
            ),
            _ => panic!("mean axis must be 0 or 1"),
        };
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Mean { a, axis })
    }

    /// Element-wise mean of equally shaped tensors (f64 accumulation, input order).
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean_of an empty list");
        let shape = self.shape(parts[0]).to_vec();
        for p in parts {
            assert_eq!(self.shape(*p), shape.as_slice(), "mean_of shape mismatch");
        }
        let bufs: Vec<&[F]> = parts.iter().map(|p| self.value(*p)).collect();
        let out = kernels::mean_of(&bufs);
        let rg = self.rg(parts);
        self.push(shape, out, rg, Op::MeanOf(parts.to_vec()))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<F> = self.value(a).iter().map(|x| kernels::gelu(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![F::of(s)], rg, Op::Sum(a))
    }

    /// Mean token cross-entropy of `[L,V]` logits against per-row targets;
    /// rows with `None` are masked out of the loss.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<u32>]) -> NodeId {
        let (l, v) = rows_cols(self.shape(logits));
        assert_eq!(targets.len(), l, "one target slot per logits row");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross-entropy with every position masked");
        let x = self.value(logits);
        let mut probs = vec![F::zero(); l * v];
        let mut nll = vec![F::zero(); l];
        let mut total = 0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!((t as usize) < v, "target id {t} out of range");
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().fold(F::neg_infinity(), |m, &z| if z > m { z } else { m });
            let mut sum = F::zero();
            let p = &mut probs[i * v..(i + 1) * v];
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - max).exp();
                sum += *pj;
            }
            let inv = F::one() / sum;
            for pj in p.iter_mut() {
                *pj *= inv;
            }
            let lse = max + sum.ln();
            nll[i] = lse - row[t as usize];
            total += nll[i].as_f64();
        }
        let loss = F::of(total / count as f64);
        let rg = self.rg(&[logits]);
        self.push(vec![1], vec![loss], rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, nll })
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of a scalar `root` for every leaf that requires them.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.check()?;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        let mut leaves = BTreeMap::new();
        let mut params = BTreeMap::new();
        if !self.requires_grad(root) {
            return Ok(Gradients { leaves, params });
        }
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(fault) = g.iter().position(|v| !v.is_finite()) {
                let _ = fault;
                return Err(Error::NumericFault {
                    op: format!("{} (backward)", node.op.name()),
                    context: Some(format!("node {i}")),
                });
            }
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    params.insert(p, g.clone());
                }
                leaves.insert(NodeId(i), g);
                continue;
            }
            let (below, _) = grads.split_at_mut(i);
            self.propagate(node, &g, below);
        }
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        // Accumulation buffer for `id`, created zeroed on first use.
        fn slot<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], id: NodeId) -> &'a mut [F] {
            grads[id.0].get_or_insert_with(|| vec![F::zero(); nodes[id.0].value.len()])
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = node.shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if !trans_b {
                    if rg(*a) {
                        gemm_nt(g, bv, slot(grads, nodes, *a), m, n, k);
                    }
                    if rg(*b) {
                        gemm_tn(av, g, slot(grads, nodes, *b), k, m, n);
                    }
                } else {
                    if rg(*a) {
                        gemm_nn(g, bv, slot(grads, nodes, *a), m, n, k);
                    }
                    if rg(*b) {
                        gemm_tn(g, av, slot(grads, nodes, *b), n, m, k);
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if rg(*x) {
                        kernels::axpy(F::one(), g, slot(grads, nodes, *x));
                    }
                }
            }
            Op::AddRow { a, row } => {
                let n = node.shape[1];
                if rg(*a) {
                    kernels::axpy(F::one(), g, slot(grads, nodes, *a));
                }
                if rg(*row) {
                    let s = slot(grads, nodes, *row);
                    for r in g.chunks(n) {
                        kernels::axpy(F::one(), r, s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = &nodes[b.0].value;
                    for ((s, gv), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                        *s += *gv * *y;
                    }
                }
                if rg(*b) {
                    let av = &nodes[a.0].value;
                    for ((s, gv), x) in slot(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                        *s += *gv * *x;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let n = node.shape[1];
                if rg(*a) {
                    let rv = &nodes[row.0].value;
                    let s = slot(grads, nodes, *a);
                    for (sr, gr) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((sv, gv), r) in sr.iter_mut().zip(gr).zip(rv) {
                            *sv += *gv * *r;
                        }
                    }
                }
                if rg(*row) {
                    let av = &nodes[a.0].value;
                    let s = slot(grads, nodes, *row);
                    for (gr, ar) in g.chunks(n).zip(av.chunks(n)) {
                        for ((sv, gv), x) in s.iter_mut().zip(gr).zip(ar) {
                            *sv += *gv * *x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    kernels::axpy(*c, g, slot(grads, nodes, *a));
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let n = node.shape[1];
                    let y = &node.value;
                    let s = slot(grads, nodes, *a);
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner = dot(gr, yr);
                        for ((sv, gv), yv) in sr.iter_mut().zip(gr).zip(yr) {
                            *sv += *yv * (*gv - inner);
                        }
                    }
                }
            }
            Op::RmsNorm { a, inv_rms } => {
                if rg(*a) {
                    let n = node.shape[1];
                    let x = &nodes[a.0].value;
                    let nf = F::of(n as f64);
                    let s = slot(grads, nodes, *a);
                    for (i, ((sr, gr), xr)) in s.chunks_mut(n).zip(g.chunks(n)).zip(x.chunks(n)).enumerate() {
                        let r = inv_rms[i];
                        let gx = dot(gr, xr);
                        let coef = r * r * r * gx / nf;
                        for ((sv, gv), xv) in sr.iter_mut().zip(gr).zip(xr) {
                            *sv += r * *gv - coef * *xv;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if rg(*table) {
                    let d = node.shape[1];
                    let s = slot(grads, nodes, *table);
                    for (k, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        kernels::axpy(F::one(), &g[k * d..(k + 1) * d], &mut s[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                if rg(*a) {
                    let (_, n) = rows_cols(&nodes[a.0].shape);
                    let s = slot(grads, nodes, *a);
                    match axis {
                        0 => kernels::axpy(F::one(), g, &mut s[start * n..start * n + g.len()]),
                        _ => {
                            let w = node.shape[1];
                            for (sr, gr) in s.chunks_mut(n).zip(g.chunks(w)) {
                                kernels::axpy(F::one(), gr, &mut sr[*start..start + w]);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let m = node.shape[0];
                let total_n = node.shape[1];
                for p in parts {
                    let (pm, pn) = rows_cols(&nodes[p.0].shape);
                    if rg(*p) {
                        let s = slot(grads, nodes, *p);
                        if *axis == 0 {
                            kernels::axpy(F::one(), &g[offset * pn..(offset + pm) * pn], s);
                        } else {
                            for i in 0..m {
                                let src = &g[i * total_n + offset..i * total_n + offset + pn];
                                kernels::axpy(F::one(), src, &mut s[i * pn..(i + 1) * pn]);
                            }
                        }
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            Op::Mean { a, axis } => {
                if rg(*a) {
                    let (m, n) = rows_cols(&nodes[a.0].shape);
                    let s = slot(grads, nodes, *a);
                    if *axis == 0 {
                        let c = F::one() / F::of(m as f64);
                        for sr in s.chunks_mut(n) {
                            kernels::axpy(c, g, sr);
                        }
                    } else {
                        let c = F::one() / F::of(n as f64);
                        for (sr, gv) in s.chunks_mut(n).zip(g) {
                            for sv in sr.iter_mut() {
                                *sv += *gv * c;
                            }
                        }
                    }
                }
            }
            Op::MeanOf(parts) => {
                let c = F::one() / F::of(parts.len() as f64);
                for p in parts {
                    if rg(*p) {
                        kernels::axpy(c, g, slot(grads, nodes, *p));
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let x = &nodes[a.0].value;
                    #[cfg(test)]
                    let k = F::of(GELU_GRAD_FAULT.with(|c| c.get()));
                    #[cfg(not(test))]
                    let k = F::one();
                    for ((sv, gv), xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        *sv += *gv * kernels::gelu_grad(*xv) * k;
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let gv = g[0];
                    for sv in slot(grads, nodes, *a).iter_mut() {
                        *sv += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, .. } => {
                if rg(*logits) {
                    let v = nodes[logits.0].shape[1];
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let c = g[0] / F::of(count as f64);
                    let s = slot(grads, nodes, *logits);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let sr = &mut s[i * v..(i + 1) * v];
                        kernels::axpy(c, &probs[i * v..(i + 1) * v], sr);
                        sr[t as usize] -= c;
                    }
                }
            }
        }
    }
}
