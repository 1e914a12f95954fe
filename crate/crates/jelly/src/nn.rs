//! Tape-level building blocks shared by the emotion encoder, the language
//! model, and the acoustic model: linear layers, pre-norm transformer
//! blocks, attention biases, and a finite-difference gradient verifier.

use crate::params::{gaussian, ones, zeros, ParamStore};
use crate::tape::{Elem, Graph, NodeId};
use ndarray::Array2;
use std::collections::BTreeMap;

/// Couples a graph under construction with the store the parameters live
/// in, so layer builders can bind tensors by name.
pub struct Net<'g, 's, F: Elem> {
    pub g: &'g mut Graph<F>,
    store: &'s ParamStore<F>,
}

impl<'g, 's, F: Elem> Net<'g, 's, F> {
    pub fn new(g: &'g mut Graph<F>, store: &'s ParamStore<F>) -> Self {
        Net { g, store }
    }

    /// Binds the named stored tensor into the graph as a parameter node.
    pub fn p(&mut self, name: &str) -> NodeId {
        self.g.param_named(name, self.store.get(name))
    }

    pub fn leaf(&mut self, value: Array2<F>) -> NodeId {
        self.g.leaf(value)
    }

    /// y = x W + b with `<prefix>.w` and `<prefix>.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let xw = self.g.matmul(x, w);
        self.g.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        self.g.layer_norm(x, gamma, beta)
    }

    /// Two-layer feed-forward with gelu, `<prefix>.l1` / `<prefix>.l2`.
    pub fn ffn(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.linear(x, &format!("{prefix}.l1"));
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.l2"))
    }

    /// Multi-head attention. Queries come from `xq`, keys and values from
    /// `xkv`; `bias` is an additive score matrix (rows of xq by rows of
    /// xkv) applied to every head, used for causal and key-validity masks.
    pub fn attention(
        &mut self,
        xq: NodeId,
        xkv: NodeId,
        heads: usize,
        prefix: &str,
        bias: Option<NodeId>,
    ) -> NodeId {
        let q = self.linear(xq, &format!("{prefix}.q"));
        let k = self.linear(xkv, &format!("{prefix}.k"));
        let v = self.linear(xkv, &format!("{prefix}.v"));
        let mixed = self.attend(q, k, v, heads, bias);
        self.linear(mixed, &format!("{prefix}.o"))
    }

    /// Scaled dot-product attention over already-projected q/k/v, split
    /// into `heads` column groups and re-concatenated.
    pub fn attend(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        bias: Option<NodeId>,
    ) -> NodeId {
        let width = self.g.value(q).ncols();
        assert_eq!(width % heads, 0, "attention width must divide into heads");
        let hd = width / heads;
        let inv = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * hd, hd);
            let kh = self.g.slice_cols(k, h * hd, hd);
            let vh = self.g.slice_cols(v, h * hd, hd);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let mut scores = self.g.scale(scores, inv);
            if let Some(b) = bias {
                scores = self.g.add(scores, b);
            }
            let attn = self.g.softmax_rows(scores);
            outs.push(self.g.matmul(attn, vh));
        }
        self.g.concat_cols(&outs)
    }

    /// Pre-norm self-attention block: x + attn(ln(x)), then x + ffn(ln(x)).
    pub fn self_block(&mut self, x: NodeId, heads: usize, prefix: &str, bias: Option<NodeId>) -> NodeId {
        let n1 = self.layer_norm(x, &format!("{prefix}.ln1"));
        let a = self.attention(n1, n1, heads, &format!("{prefix}.attn"), bias);
        let x = self.g.add(x, a);
        let n2 = self.layer_norm(x, &format!("{prefix}.ln2"));
        let f = self.ffn(n2, &format!("{prefix}.ffn"));
        self.g.add(x, f)
    }

    /// Q-former-style block: query self-attention, cross-attention into
    /// `features`, then a feed-forward, all pre-norm residual.
    pub fn cross_block(
        &mut self,
        queries: NodeId,
        features: NodeId,
        heads: usize,
        prefix: &str,
        feature_bias: Option<NodeId>,
    ) -> NodeId {
        let n1 = self.layer_norm(queries, &format!("{prefix}.ln1"));
        let a = self.attention(n1, n1, heads, &format!("{prefix}.self"), None);
        let q = self.g.add(queries, a);
        let n2 = self.layer_norm(q, &format!("{prefix}.ln2"));
        let c = self.attention(n2, features, heads, &format!("{prefix}.cross"), feature_bias);
        let q = self.g.add(q, c);
        let n3 = self.layer_norm(q, &format!("{prefix}.ln3"));
        let f = self.ffn(n3, &format!("{prefix}.ffn"));
        self.g.add(q, f)
    }

    /// Mean of the rows where `valid` is true, as a 1 x d node. Built from
    /// a constant averaging row so masked rows contribute exactly zero.
    pub fn masked_mean_rows(&mut self, x: NodeId, valid: &[bool]) -> NodeId {
        let rows = self.g.value(x).nrows();
        assert_eq!(rows, valid.len(), "mask length must match rows");
        let n = valid.iter().filter(|&&m| m).count();
        assert!(n > 0, "masked mean needs at least one valid row");
        let w = F::from_f64(1.0 / n as f64);
        let mut avg = Array2::zeros((1, rows));
        for (i, &m) in valid.iter().enumerate() {
            if m {
                avg[[0, i]] = w;
            }
        }
        let avg = self.g.leaf(avg);
        self.g.matmul(avg, x)
    }
}

/// Additive score matrix that hides position j from position i when j > i.
pub fn causal_bias<F: Elem>(n: usize) -> Array2<F> {
    let mut b = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            b[[i, j]] = F::neg_infinity();
        }
    }
    b
}

/// Additive score matrix that hides key columns whose `valid` flag is
/// false from every query row. Returns None when nothing is masked.
pub fn key_mask_bias<F: Elem>(query_rows: usize, valid: &[bool]) -> Option<Array2<F>> {
    if valid.iter().all(|&m| m) {
        return None;
    }
    assert!(valid.iter().any(|&m| m), "attention needs at least one valid key");
    let mut b = Array2::zeros((query_rows, valid.len()));
    for (j, &m) in valid.iter().enumerate() {
        if !m {
            for i in 0..query_rows {
                b[[i, j]] = F::neg_infinity();
            }
        }
    }
    Some(b)
}

/// Fixed sine/cosine position table, one row per position.
pub fn sinusoid<F: Elem>(rows: usize, dim: usize) -> Array2<F> {
    let mut pe = Array2::zeros((rows, dim));
    for p in 0..rows {
        for i in 0..dim / 2 {
            let rate = (p as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[p, 2 * i]] = F::from_f64(rate.sin());
            pe[[p, 2 * i + 1]] = F::from_f64(rate.cos());
        }
    }
    pe
}

pub fn init_linear<F: Elem>(store: &mut ParamStore<F>, prefix: &str, d_in: usize, d_out: usize, seed: u64) {
    let w_name = format!("{prefix}.w");
    store.insert(&w_name, gaussian(seed, &w_name, d_in, d_out, 0.02));
    store.insert(&format!("{prefix}.b"), zeros(1, d_out));
}

pub fn init_layer_norm<F: Elem>(store: &mut ParamStore<F>, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gamma"), ones(1, dim));
    store.insert(&format!("{prefix}.beta"), zeros(1, dim));
}

/// q/k/v/o projections; queries at `d_q` wide, keys and values from a
/// `d_kv`-wide stream, all projected to `d_q`.
pub fn init_attention<F: Elem>(store: &mut ParamStore<F>, prefix: &str, d_q: usize, d_kv: usize, seed: u64) {
    init_linear(store, &format!("{prefix}.q"), d_q, d_q, seed);
    init_linear(store, &format!("{prefix}.k"), d_kv, d_q, seed);
    init_linear(store, &format!("{prefix}.v"), d_kv, d_q, seed);
    init_linear(store, &format!("{prefix}.o"), d_q, d_q, seed);
}

pub fn init_ffn<F: Elem>(store: &mut ParamStore<F>, prefix: &str, dim: usize, hidden: usize, seed: u64) {
    init_linear(store, &format!("{prefix}.l1"), dim, hidden, seed);
    init_linear(store, &format!("{prefix}.l2"), hidden, dim, seed);
}

pub fn init_self_block<F: Elem>(store: &mut ParamStore<F>, prefix: &str, dim: usize, seed: u64) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, &format!("{prefix}.attn"), dim, dim, seed);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_ffn(store, &format!("{prefix}.ffn"), dim, 4 * dim, seed);
}

pub fn init_cross_block<F: Elem>(store: &mut ParamStore<F>, prefix: &str, d_q: usize, d_kv: usize, seed: u64) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d_q);
    init_attention(store, &format!("{prefix}.self"), d_q, d_q, seed);
    init_layer_norm(store, &format!("{prefix}.ln2"), d_q);
    init_attention(store, &format!("{prefix}.cross"), d_q, d_kv, seed);
    init_layer_norm(store, &format!("{prefix}.ln3"), d_q);
    init_ffn(store, &format!("{prefix}.ffn"), d_q, 4 * d_q, seed);
}

/// Central-difference check of every analytic gradient the scalar loss
/// produced by `build` assigns to the stored tensors. Returns the worst
/// relative error per tensor; `stride` thins the elements probed on large
/// tensors (1 probes all).
pub fn finite_difference_errors<F, B>(
    store: &ParamStore<F>,
    eps: f64,
    stride: usize,
    mut build: B,
) -> BTreeMap<String, f64>
where
    F: Elem,
    B: FnMut(&mut Graph<F>, &ParamStore<F>) -> NodeId,
{
    assert!(stride >= 1);
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss);
    let grads: BTreeMap<String, Array2<F>> = g
        .bound_grads()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();

    let mut worst = BTreeMap::new();
    for name in store.names().map(|s| s.to_string()).collect::<Vec<_>>() {
        let shape = store.get(&name).dim();
        let analytic = grads.get(&name);
        let mut err_max = 0.0f64;
        let mut idx = 0usize;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                if idx % stride != 0 {
                    idx += 1;
                    continue;
                }
                idx += 1;
                let mut probe = |delta: f64| -> f64 {
                    let mut bumped = store.clone();
                    let v = bumped.get_mut(&name);
                    v[[r, c] ] = v[[r, c]] + F::from_f64(delta);
                    let mut g2 = Graph::new();
                    let l = build(&mut g2, &bumped);
                    Elem::to_f64(g2.scalar(l))
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let an = analytic.map_or(0.0, |t| Elem::to_f64(t[[r, c]]));
                let denom = (fd.abs() + an.abs()).max(1e-6);
                err_max = err_max.max((fd - an).abs() / denom);
            }
        }
        worst.insert(name, err_max);
    }
    worst
}
