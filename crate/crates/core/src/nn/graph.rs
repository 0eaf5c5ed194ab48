//! Tape-based reverse-mode differentiation over 2-D f64 tensors, with the
//! fused ops the transformer needs (expert-routed linear maps and norms,
//! rotary positions, block-masked multi-head attention).

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, matmul, matmul_nt, matmul_tn, Tensor};
use crate::tokenstream::AttentionMask;
use crate::util::sha256_hex;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Content hash over names, shapes and values (selected by `filter`).
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            bytes.extend(p.name.as_bytes());
            bytes.extend((p.value.rows as u64).to_le_bytes());
            bytes.extend((p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                bytes.extend(v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn freeze_where(&mut self, filter: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| filter(&p.name)) {
            p.frozen = true;
        }
    }

    /// Rebuilds the name index after deserialization.
    pub fn from_params(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }
}

/// Row indices owned by each expert; every row belongs to exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub n: usize,
    pub rows: Vec<Vec<usize>>,
}

impl Route {
    pub fn new(n: usize, owner: &[usize], experts: usize) -> Self {
        assert_eq!(owner.len(), n);
        let mut rows = vec![Vec::new(); experts];
        for (i, &e) in owner.iter().enumerate() {
            rows[e].push(i);
        }
        Self { n, rows }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows(NodeId, Arc<Vec<f64>>),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Gather(NodeId, Arc<Vec<usize>>),
    Place(NodeId, Arc<Vec<usize>>),
    RoutedLinear {
        x: NodeId,
        route: Arc<Route>,
        w: Vec<NodeId>,
        b: Vec<Option<NodeId>>,
    },
    RoutedRms {
        x: NodeId,
        route: Arc<Route>,
        g: Vec<NodeId>,
        inv: Vec<f64>,
    },
    Rope {
        x: NodeId,
        pos: Arc<Vec<f64>>,
        heads: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        blocks: Arc<Vec<(usize, usize)>>,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        probs: Tensor,
    },
    Mse(NodeId, Arc<Tensor>),
    L1(NodeId, Arc<Tensor>),
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients by parameter index.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, other: Grads) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(&y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

const ROPE_BASE: f64 = 10_000.0;

fn rope_apply(x: &mut Tensor, pos: &[f64], heads: usize, sign: f64) {
    let hd = x.cols / heads;
    for (r, &p) in pos.iter().enumerate() {
        let row = x.row_mut(r);
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = p * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = (sign * theta).sin_cos();
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// One forward computation; parameters are borrowed from the store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = &self.store.params[id];
        let n = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn param_named(&mut self, name: &str) -> NodeId {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nt(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a 1×m row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!((bias.rows, bias.cols), (1, v.cols), "add_row shapes");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Multiplies row r of `a` by `s[r]`.
    pub fn scale_rows(&mut self, a: NodeId, s: Arc<Vec<f64>>) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.rows, s.len());
        for (r, &k) in s.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::ScaleRows(a, s), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = gelu(*x));
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = 1.0 / (1.0 + (-*x).exp()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn gather(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let v = self.value(a).gather_rows(&idx);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gather(a, idx), ng)
    }

    /// Places row `r` of `a` at row `idx[r]` of an `n`-row zero matrix.
    pub fn place(&mut self, a: NodeId, idx: Arc<Vec<usize>>, n: usize) -> NodeId {
        let src = self.value(a);
        let mut v = Tensor::zeros(n, src.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (x, y) in v.row_mut(i).iter_mut().zip(src.row(r)) {
                *x += y;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::Place(a, idx), ng)
    }

    /// Row block of each expert times that expert's weight (plus bias).
    pub fn routed_linear(&mut self, x: NodeId, route: Arc<Route>, w: Vec<NodeId>, b: Vec<Option<NodeId>>) -> NodeId {
        let xv = self.value(x);
        let cols = self.value(w[0]).cols;
        let mut out = Tensor::zeros(xv.rows, cols);
        for (e, rows) in route.rows.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = xv.gather_rows(rows);
            let mut ye = matmul(&xe, self.value(w[e]));
            if let Some(bn) = b[e] {
                let bias = self.value(bn);
                for r in 0..ye.rows {
                    for (v, bb) in ye.row_mut(r).iter_mut().zip(&bias.data) {
                        *v += bb;
                    }
                }
            }
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(ye.row(k));
            }
        }
        let mut deps = vec![x];
        deps.extend(&w);
        deps.extend(b.iter().flatten());
        let ng = self.ng(&deps);
        self.push(out, Op::RoutedLinear { x, route, w, b }, ng)
    }

    /// RMS normalization with a per-expert gain vector.
    pub fn routed_rms(&mut self, x: NodeId, route: Arc<Route>, g: Vec<NodeId>) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv = vec![0.0; xv.rows];
        for (e, rows) in route.rows.iter().enumerate() {
            let gain = &self.nodes[g[e]].value.data;
            for &i in rows {
                let r = xv.row(i);
                let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
                let s = 1.0 / (ms + 1e-6).sqrt();
                inv[i] = s;
                for ((o, v), gg) in out.row_mut(i).iter_mut().zip(r).zip(gain) {
                    *o = v * s * gg;
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(&g);
        let ng = self.ng(&deps);
        self.push(out, Op::RoutedRms { x, route, g, inv }, ng)
    }

    /// Rotary position encoding over `heads` equal slices of each row.
    pub fn rope(&mut self, x: NodeId, pos: Arc<Vec<f64>>, heads: usize) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(pos.len(), v.rows);
        assert!(
            v.cols.is_multiple_of(heads) && (v.cols / heads).is_multiple_of(2),
            "rope needs even head width"
        );
        rope_apply(&mut v, &pos, heads, 1.0);
        let ng = self.ng(&[x]);
        self.push(v, Op::Rope { x, pos, heads }, ng)
    }

    /// Multi-head attention restricted to contiguous `blocks` and the mask.
    /// Every row must have at least one allowed key.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        blocks: Arc<Vec<(usize, usize)>>,
        mask: &AttentionMask,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows;
        let d = qv.cols;
        let hd = d / heads;
        assert_eq!(mask.n, n, "mask shape");
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for &(start, len) in blocks.iter() {
            for h in 0..heads {
                let off = start * d + h * hd;
                let mut s = vec![0.0; len * len];
                gemm(
                    len,
                    hd,
                    len,
                    scale,
                    &qv.data[off..],
                    d,
                    1,
                    &kv.data[off..],
                    1,
                    d,
                    0.0,
                    &mut s,
                    len,
                    1,
                );
                for i in 0..len {
                    let row = &mut s[i * len..(i + 1) * len];
                    let allowed = &mask.row(start + i)[start..start + len];
                    let mx = row
                        .iter()
                        .zip(allowed)
                        .filter(|(_, &a)| a)
                        .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
                    assert!(mx.is_finite(), "row {} has no allowed key", start + i);
                    let mut z = 0.0;
                    for (x, &a) in row.iter_mut().zip(allowed) {
                        *x = if a { (*x - mx).exp() } else { 0.0 };
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                gemm(
                    len,
                    len,
                    hd,
                    1.0,
                    &s,
                    len,
                    1,
                    &vv.data[off..],
                    d,
                    1,
                    0.0,
                    &mut out.data[off..],
                    d,
                    1,
                );
                probs.push(s);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            ng,
        )
    }

    /// Attention weights of `(block, head)` from an attention node.
    pub fn attention_probs(&self, node: NodeId, block: usize, head: usize) -> Option<&[f64]> {
        match &self.nodes[node].op {
            Op::Attention { heads, probs, .. } => probs.get(block * heads + head).map(|p| p.as_slice()),
            _ => None,
        }
    }

    /// Mean next-token cross entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for r in 0..lv.rows {
            let row = probs.row_mut(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
            loss -= (lv.row(r)[targets[r]] - mx - z.ln()).min(0.0);
        }
        let m = lv.rows.max(1) as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss / m),
            Op::CrossEntropy { logits, targets, probs },
            ng,
        )
    }

    pub fn mse(&mut self, pred: NodeId, target: Arc<Tensor>) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        let n = p.data.len().max(1) as f64;
        let l = p
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(l), Op::Mse(pred, target), ng)
    }

    pub fn l1(&mut self, pred: NodeId, target: Arc<Tensor>) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        let n = p.data.len().max(1) as f64;
        let l = p.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(l), Op::L1(pred, target), ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v = terms.iter().map(|&(n, w)| w * self.value(n).item()).sum();
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&ids);
        self.push(Tensor::scalar(v), Op::WeightedSum(terms), ng)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads(vec![None; self.store.len()]);
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Tensor>>, to: NodeId, t: Tensor| {
                if !self.nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(x) => x.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match &mut out.0[*pid] {
                    Some(x) => x.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        acc(&mut grads, *a, matmul_nt(&g, self.value(*b)));
                    }
                    if self.nodes[*b].needs_grad {
                        acc(&mut grads, *b, matmul_tn(self.value(*a), &g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[*a].needs_grad {
                        acc(&mut grads, *a, matmul(&g, self.value(*b)));
                    }
                    if self.nodes[*b].needs_grad {
                        acc(&mut grads, *b, matmul_tn(&g, self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut t = g;
                    t.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, t);
                }
                Op::ScaleRows(a, s) => {
                    let mut t = g;
                    for (r, &k) in s.iter().enumerate() {
                        t.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Gelu(a) => {
                    let mut t = g;
                    for (x, &v) in t.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= gelu_grad(v);
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Sigmoid(a) => {
                    let mut t = g;
                    for (x, &y) in t.data.iter_mut().zip(&node.value.data) {
                        *x *= y * (1.0 - y);
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut t = Tensor::zeros(src.rows, src.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, y) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Place(a, idx) => acc(&mut grads, *a, g.gather_rows(idx)),
                Op::RoutedLinear { x, route, w, b } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for (e, rows) in route.rows.iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let ge = g.gather_rows(rows);
                        if self.nodes[w[e]].needs_grad {
                            let xe = xv.gather_rows(rows);
                            acc(&mut grads, w[e], matmul_tn(&xe, &ge));
                        }
                        if let Some(bn) = b[e] {
                            let mut gb = Tensor::zeros(1, ge.cols);
                            for r in 0..ge.rows {
                                for (s, y) in gb.data.iter_mut().zip(ge.row(r)) {
                                    *s += y;
                                }
                            }
                            acc(&mut grads, bn, gb);
                        }
                        if self.nodes[*x].needs_grad {
                            let dxe = matmul_nt(&ge, self.value(w[e]));
                            for (k, &i) in rows.iter().enumerate() {
                                dx.row_mut(i).copy_from_slice(dxe.row(k));
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::RoutedRms {
                    x,
                    route,
                    g: gains,
                    inv,
                } => {
                    let xv = self.value(*x);
                    let c = xv.cols as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for (e, rows) in route.rows.iter().enumerate() {
                        let gain = &self.value(gains[e]).data;
                        let mut dg = Tensor::zeros(1, xv.cols);
                        for &i in rows {
                            let s = inv[i];
                            let xr = xv.row(i);
                            let gr = g.row(i);
                            let mut dot = 0.0;
                            for j in 0..xr.len() {
                                let xh = xr[j] * s;
                                dg.data[j] += gr[j] * xh;
                                dot += gr[j] * gain[j] * xh;
                            }
                            let dr = dx.row_mut(i);
                            for j in 0..xr.len() {
                                dr[j] = s * (gr[j] * gain[j] - xr[j] * s * dot / c);
                            }
                        }
                        if !rows.is_empty() {
                            acc(&mut grads, gains[e], dg);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Rope { x, pos, heads } => {
                    let mut t = g;
                    rope_apply(&mut t, pos, *heads, -1.0);
                    acc(&mut grads, *x, t);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    blocks,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols;
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.rows, d);
                    let mut dk = Tensor::zeros(qv.rows, d);
                    let mut dv = Tensor::zeros(qv.rows, d);
                    for (bi, &(start, len)) in blocks.iter().enumerate() {
                        for h in 0..*heads {
                            let p = &probs[bi * heads + h];
                            let off = start * d + h * hd;
                            // dV = Pᵀ dO
                            gemm(
                                len,
                                len,
                                hd,
                                1.0,
                                p,
                                1,
                                len,
                                &g.data[off..],
                                d,
                                1,
                                1.0,
                                &mut dv.data[off..],
                                d,
                                1,
                            );
                            // dP = dO Vᵀ
                            let mut dp = vec![0.0; len * len];
                            gemm(
                                len,
                                hd,
                                len,
                                1.0,
                                &g.data[off..],
                                d,
                                1,
                                &vv.data[off..],
                                1,
                                d,
                                0.0,
                                &mut dp,
                                len,
                                1,
                            );
                            for i in 0..len {
                                let pr = &p[i * len..(i + 1) * len];
                                let dr = &mut dp[i * len..(i + 1) * len];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (x, &pp) in dr.iter_mut().zip(pr) {
                                    *x = pp * (*x - dot);
                                }
                            }
                            gemm(
                                len,
                                len,
                                hd,
                                scale,
                                &dp,
                                len,
                                1,
                                &kv.data[off..],
                                d,
                                1,
                                1.0,
                                &mut dq.data[off..],
                                d,
                                1,
                            );
                            gemm(
                                len,
                                len,
                                hd,
                                scale,
                                &dp,
                                1,
                                len,
                                &qv.data[off..],
                                d,
                                1,
                                1.0,
                                &mut dk.data[off..],
                                d,
                                1,
                            );
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.item() / targets.len().max(1) as f64;
                    let mut t = probs.clone();
                    for (r, &c) in targets.iter().enumerate() {
                        t.row_mut(r)[c] -= 1.0;
                    }
                    t.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *logits, t);
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred);
                    let s = 2.0 * g.item() / p.data.len().max(1) as f64;
                    let data = p.data.iter().zip(&target.data).map(|(a, b)| s * (a - b)).collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.rows, p.cols, data));
                }
                Op::L1(pred, target) => {
                    let p = self.value(*pred);
                    let s = g.item() / p.data.len().max(1) as f64;
                    let data = p
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                s
                            } else if d < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.rows, p.cols, data));
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        acc(&mut grads, n, Tensor::scalar(w * g.item()));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::util::rng_for(seed, "test");
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Checks d(loss)/d(param 0) against central differences.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> NodeId) {
        let mut g = Graph::new(store);
        let l = f(&mut g);
        let grads = g.backward(l);
        for pid in 0..store.len() {
            let an = grads.get(pid).cloned().unwrap_or(Tensor::zeros(0, 0));
            for k in 0..store.params[pid].value.data.len() {
                let eps = 1e-6;
                let mut s2 = store.clone();
                s2.params[pid].value.data[k] += eps;
                let mut g2 = Graph::new(&s2);
                let lp = f(&mut g2);
                let up = g2.value(lp).item();
                let mut s3 = store.clone();
                s3.params[pid].value.data[k] -= eps;
                let mut g3 = Graph::new(&s3);
                let lm = f(&mut g3);
                let down = g3.value(lm).item();
                let fd = (up - down) / (2.0 * eps);
                let a = an.data[k];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pid}[{k}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn routed_ops_and_attention_gradients() {
        let n = 6;
        let mut store = ParamStore::new();
        store.add("x", rand_tensor(n, 4, 1));
        for e in 0..2 {
            store.add(&format!("w{e}"), rand_tensor(4, 4, 10 + e as u64));
            store.add(&format!("b{e}"), rand_tensor(1, 4, 20 + e as u64));
            store.add(&format!("g{e}"), rand_tensor(1, 4, 30 + e as u64));
        }
        let route = Arc::new(Route::new(n, &[0, 1, 0, 1, 1, 0], 2));
        let mut mask = AttentionMask::new(n);
        for i in 0..n {
            for j in 0..=i {
                mask.set(i, j, (i + j) % 3 != 1 || i == j);
            }
        }
        let target = Arc::new(rand_tensor(n, 4, 99));
        check(&store, |g| {
            let x = g.param_named("x");
            let w: Vec<_> = (0..2).map(|e| g.param_named(&format!("w{e}"))).collect();
            let b: Vec<_> = (0..2).map(|e| Some(g.param_named(&format!("b{e}")))).collect();
            let gs: Vec<_> = (0..2).map(|e| g.param_named(&format!("g{e}"))).collect();
            let h = g.routed_rms(x, route.clone(), gs);
            let q = g.routed_linear(h, route.clone(), w.clone(), b.clone());
            let q = g.rope(q, Arc::new((0..n).map(|i| i as f64).collect()), 2);
            let v = g.gelu(h);
            let a = g.attention(q, h, v, 2, Arc::new(vec![(0, 3), (3, 3)]), &mask);
            let s = g.sigmoid(a);
            let s = g.scale_rows(s, Arc::new(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]));
            let l1 = g.mse(s, target.clone());
            let l2 = g.l1(a, target.clone());
            let idx = Arc::new(vec![0, 2, 5]);
            let picked = g.gather(a, idx.clone());
            let logits = g.matmul_nt(picked, w[1]);
            let ce = g.cross_entropy(logits, Arc::new(vec![1, 3, 0]));
            g.weighted_sum(vec![(l1, 0.5), (l2, 1.0), (ce, 0.25)])
        });
    }

    #[test]
    fn masked_probabilities_are_exactly_zero() {
        let mut store = ParamStore::new();
        store.add("x", rand_tensor(4, 4, 3));
        let mut g = Graph::new(&store);
        let x = g.param_named("x");
        let mut mask = AttentionMask::identity(4);
        mask.set(3, 0, true);
        let a = g.attention(x, x, x, 1, Arc::new(vec![(0, 4)]), &mask);
        let p = g.attention_probs(a, 0, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if !mask.allowed(i, j) {
                    assert_eq!(p[i * 4 + j], 0.0);
                }
            }
        }
        // identity mask passes values through
        assert_eq!(g.value(a).row(1), store.get("x").row(1));
    }
}
