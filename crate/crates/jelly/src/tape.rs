//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records operations on an append-only tape. Every value is an
//! `ndarray::Array2`, so the same model code runs in f32 for training and in
//! f64 for gradient verification. `backward` walks the tape in reverse and
//! accumulates gradients into grad-tracked leaves.

use ndarray::{concatenate, s, Array2, Axis, ScalarOperand};
use num_traits::Float;
use std::collections::HashMap;

/// Element type shared by all numeric code: implemented for `f32` and `f64`.
pub trait Elem:
    ndarray::LinalgScalar
    + Float
    + ScalarOperand
    + num_traits::NumAssignOps
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op<F: Elem> {
    /// Constant input; `grad` marks it as a parameter leaf.
    Leaf { grad: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcasts a 1 x n row over every row of the left operand.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Multiplies by a 1 x 1 node.
    MulBroadcast(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    /// Row softmaxes; -inf entries get exactly zero weight. Each row must
    /// contain at least one finite entry.
    SoftmaxRows(NodeId),
    /// Per-row normalization with learned 1 x n gain and shift.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    /// Mean cross-entropy over masked rows of a logit matrix.
    CrossEntropyMean { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    /// Weighted mean squared error against a constant target.
    MseMean { pred: NodeId, target: Array2<F>, weight: Array2<F> },
}

struct Node<F: Elem> {
    op: Op<F>,
    value: Array2<F>,
}

/// Append-only computation tape. Node inputs always precede the node, so
/// reverse id order is a valid backward schedule.
pub struct Graph<F: Elem> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Array2<F>>>,
    bound: HashMap<String, NodeId>,
}

impl<F: Elem> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), bound: HashMap::new() }
    }

    fn push(&mut self, op: Op<F>, value: Array2<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar node expected");
        v[[0, 0]]
    }

    /// Constant input; gradients never accumulate here.
    pub fn leaf(&mut self, value: Array2<F>) -> NodeId {
        self.push(Op::Leaf { grad: false }, value)
    }

    /// Grad-tracked input.
    pub fn param(&mut self, value: Array2<F>) -> NodeId {
        self.push(Op::Leaf { grad: true }, value)
    }

    /// Grad-tracked input memoized by name, so a tensor used twice in one
    /// forward pass accumulates both gradient contributions on one node.
    pub fn param_named(&mut self, name: &str, value: &Array2<F>) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.param(value.clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Names and gradients of every bound parameter that received one.
    pub fn bound_grads(&self) -> Vec<(&str, &Array2<F>)> {
        let mut out: Vec<(&str, &Array2<F>)> = self
            .bound
            .iter()
            .filter_map(|(name, id)| self.grads[id.0].as_ref().map(|g| (name.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let dim = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, dim.1), "row broadcast shape mismatch");
        let v = self.value(a) + &self.value(row).broadcast(dim).unwrap();
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_broadcast(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).dim(), (1, 1), "broadcast factor must be 1x1");
        let c = self.value(s)[[0, 0]];
        let v = self.value(a) * c;
        self.push(Op::MulBroadcast(a, s), v)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu_value);
        self.push(Op::Gelu(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            debug_assert!(max.is_finite(), "softmax row has no finite entry");
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let n = self.value(x).ncols();
        assert_eq!(self.value(gamma).dim(), (1, n));
        assert_eq!(self.value(beta).dim(), (1, n));
        let v = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let mut out = xv.clone();
            for mut row in out.rows_mut() {
                let (mean, var) = row_mean_var(row.as_slice().unwrap());
                let inv = (var + ln_eps::<F>()).sqrt().recip();
                for (j, e) in row.iter_mut().enumerate() {
                    *e = (*e - mean) * inv * gv[[0, j]] + bv[[0, j]];
                }
            }
            out
        };
        self.push(Op::LayerNorm { x, gamma, beta }, v)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows { x, start }, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start }, v)
    }

    /// Mean cross-entropy over rows where `mask` is true. At least one row
    /// must be masked in.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), mask.len());
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "cross_entropy_mean needs at least one masked-in row");
        let mut total = F::zero();
        for (i, row) in lv.rows().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).fold(F::zero(), |a, b| a + b).ln();
            total = total + lse - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), total / F::from_f64(count as f64));
        self.push(Op::CrossEntropyMean { logits, targets: targets.to_vec(), mask: mask.to_vec() }, v)
    }

    /// Weighted mean squared error: sum(w * (pred - target)^2) / sum(w).
    pub fn mse_mean(&mut self, pred: NodeId, target: Array2<F>, weight: Array2<F>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.dim(), weight.dim());
        let wsum = weight.sum();
        assert!(wsum > F::zero(), "mse_mean needs positive total weight");
        let mut total = F::zero();
        ndarray::Zip::from(pv).and(&target).and(&weight).for_each(|&p, &t, &w| {
            let d = p - t;
            total = total + w * d * d;
        });
        let v = Array2::from_elem((1, 1), total / wsum);
        self.push(Op::MseMean { pred, target, weight }, v)
    }

    /// Backpropagates from a 1 x 1 root through the whole tape.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.acc(a, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc(a, g.clone());
                    self.acc(b, g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(a, g);
                    self.acc(row, drow);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::MulBroadcast(a, s) => {
                    let (a, s) = (*a, *s);
                    let c = self.nodes[s.0].value[[0, 0]];
                    let da = &g * c;
                    let ds = Array2::from_elem((1, 1), (&g * &self.nodes[a.0].value).sum());
                    self.acc(a, da);
                    self.acc(s, ds);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da = &g * c;
                    self.acc(a, da);
                }
                Op::Gelu(a) => {
                    let da = {
                        let x = &self.nodes[a.0].value;
                        let mut d = g.clone();
                        ndarray::Zip::from(&mut d).and(x).for_each(|gi, &xi| {
                            *gi = *gi * gelu_derivative(xi);
                        });
                        d
                    };
                    self.acc(*a, da);
                }
                Op::SoftmaxRows(a) => {
                    let da = {
                        let y = &self.nodes[i].value;
                        let mut d = &g * y;
                        for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                            let dot = drow.sum();
                            for (e, &yv) in drow.iter_mut().zip(yrow.iter()) {
                                *e = *e - yv * dot;
                            }
                        }
                        d
                    };
                    self.acc(*a, da);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (dx, dgamma, dbeta) = {
                        let xv = &self.nodes[x.0].value;
                        let gv = &self.nodes[gamma.0].value;
                        let n = xv.ncols();
                        let nf = F::from_f64(n as f64);
                        let mut dx = Array2::zeros(xv.dim());
                        let mut dgamma = Array2::zeros((1, n));
                        let mut dbeta = Array2::zeros((1, n));
                        for (r, xrow) in xv.rows().into_iter().enumerate() {
                            let (mean, var) = row_mean_var(xrow.as_slice().unwrap());
                            let inv = (var + ln_eps::<F>()).sqrt().recip();
                            let mut dxhat_dot = F::zero();
                            let mut dxhat_xhat_dot = F::zero();
                            for j in 0..n {
                                let xhat = (xrow[j] - mean) * inv;
                                let dxhat = g[[r, j]] * gv[[0, j]];
                                dgamma[[0, j]] = dgamma[[0, j]] + g[[r, j]] * xhat;
                                dbeta[[0, j]] = dbeta[[0, j]] + g[[r, j]];
                                dxhat_dot = dxhat_dot + dxhat;
                                dxhat_xhat_dot = dxhat_xhat_dot + dxhat * xhat;
                            }
                            for j in 0..n {
                                let xhat = (xrow[j] - mean) * inv;
                                let dxhat = g[[r, j]] * gv[[0, j]];
                                dx[[r, j]] = inv * (dxhat - dxhat_dot / nf - xhat * dxhat_xhat_dot / nf);
                            }
                        }
                        (dx, dgamma, dbeta)
                    };
                    self.acc(x, dx);
                    self.acc(gamma, dgamma);
                    self.acc(beta, dbeta);
                }
                Op::GatherRows { table, ids } => {
                    let (table, ids) = (*table, ids.clone());
                    let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    self.acc(table, dt);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.nrows();
                        let dp = g.slice(s![start..start + len, ..]).to_owned();
                        self.acc(p, dp);
                        start += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(s![start..start + g.nrows(), ..]).assign(&g);
                    self.acc(x, dx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.ncols();
                        let dp = g.slice(s![.., start..start + len]).to_owned();
                        self.acc(p, dp);
                        start += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(s![.., start..start + g.ncols()]).assign(&g);
                    self.acc(x, dx);
                }
                Op::CrossEntropyMean { logits, targets, mask } => {
                    let (logits, targets, mask) = (*logits, targets.clone(), mask.clone());
                    let gs = g[[0, 0]];
                    let count =
                        F::from_f64(mask.iter().filter(|&&m| m).count() as f64);
                    let dl = {
                        let lv = &self.nodes[logits.0].value;
                        let mut dl = Array2::zeros(lv.dim());
                        for (r, row) in lv.rows().into_iter().enumerate() {
                            if !mask[r] {
                                continue;
                            }
                            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                            let mut exps: Vec<F> = row.iter().map(|&e| (e - max).exp()).collect();
                            let sum: F = exps.iter().fold(F::zero(), |a, &b| a + b);
                            for e in exps.iter_mut() {
                                *e = *e / sum;
                            }
                            for j in 0..lv.ncols() {
                                let onehot = if j == targets[r] { F::one() } else { F::zero() };
                                dl[[r, j]] = gs * (exps[j] - onehot) / count;
                            }
                        }
                        dl
                    };
                    self.acc(logits, dl);
                }
                Op::MseMean { pred, target, weight } => {
                    let pred = *pred;
                    let gs = g[[0, 0]];
                    let dl = {
                        let pv = &self.nodes[pred.0].value;
                        let wsum = weight.sum();
                        let two = F::from_f64(2.0);
                        let mut dl = Array2::zeros(pv.dim());
                        ndarray::Zip::from(&mut dl).and(pv).and(target).and(weight).for_each(
                            |d, &p, &t, &w| {
                                *d = gs * two * w * (p - t) / wsum;
                            },
                        );
                        dl
                    };
                    self.acc(pred, dl);
                }
            }
        }
        // Drop gradients on plain leaves so only parameters report one.
        for i in 0..self.nodes.len() {
            if let Op::Leaf { grad: false } = self.nodes[i].op {
                self.grads[i] = None;
            }
        }
    }

    fn acc(&mut self, id: NodeId, delta: Array2<F>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }
}

fn ln_eps<F: Elem>() -> F {
    F::from_f64(1e-5)
}

fn row_mean_var<F: Elem>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().fold(F::zero(), |a, &b| a + b) / n;
    let var = row
        .iter()
        .map(|&e| {
            let d = e - mean;
            d * d
        })
        .fold(F::zero(), |a, b| a + b)
        / n;
    (mean, var)
}

fn gelu_value<F: Elem>(x: F) -> F {
    let half = F::from_f64(0.5);
    let k = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c = F::from_f64(0.044715);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_derivative<F: Elem>(x: F) -> F {
    let half = F::from_f64(0.5);
    let k = F::from_f64(0.7978845608028654);
    let c = F::from_f64(0.044715);
    let three = F::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| {
            let u: f64 = rng.gen::<f64>() - 0.5;
            u * 2.0
        })
    }

    /// Frobenius inner product with a fixed matrix, built from tape ops so
    /// the probe itself is differentiable.
    fn probe(g: &mut Graph<f64>, x: NodeId, r: &Array2<f64>) -> NodeId {
        let rl = g.leaf(r.clone());
        let prod = g.mul(x, rl);
        let ones_row = g.leaf(Array2::ones((1, r.nrows())));
        let ones_col = g.leaf(Array2::ones((r.ncols(), 1)));
        let rowsum = g.matmul(ones_row, prod);
        g.matmul(rowsum, ones_col)
    }

    /// Central-difference check of d(probe)/d(input) for a unary builder.
    fn check_unary(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        input: Array2<f64>,
        seed: u64,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (m0, n0) = {
            let mut g = Graph::new();
            let x = g.param(input.clone());
            let y = build(&mut g, x);
            g.value(y).dim()
        };
        let r = randn(&mut rng, m0, n0);
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let y = build(&mut g, x);
        let loss = probe(&mut g, y, &r);
        g.backward(loss);
        let analytic = g.grad(x).unwrap().clone();

        let eps = 1e-6;
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let eval = |v: f64| {
                    let mut pert = input.clone();
                    pert[[i, j]] = v;
                    let mut g = Graph::new();
                    let x = g.param(pert);
                    let y = build(&mut g, x);
                    let loss = probe(&mut g, y, &r);
                    g.scalar(loss)
                };
                let num = (eval(input[[i, j]] + eps) - eval(input[[i, j]] - eps)) / (2.0 * eps);
                let a = analytic[[i, j]];
                let denom = a.abs().max(num.abs()).max(1e-8);
                assert!(
                    (a - num).abs() / denom < 1e-5,
                    "grad mismatch at ({i},{j}): analytic {a} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let b = randn(&mut rng, 4, 3);
        check_unary(
            move |g, x| {
                let bl = g.leaf(b.clone());
                g.matmul(x, bl)
            },
            randn(&mut rng, 2, 4),
            11,
        );
    }

    #[test]
    fn matmul_right_operand_grads_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = randn(&mut rng, 3, 4);
        check_unary(
            move |g, x| {
                let al = g.leaf(a.clone());
                g.matmul(al, x)
            },
            randn(&mut rng, 4, 2),
            12,
        );
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        check_unary(|g, x| g.softmax_rows(x), randn(&mut rng, 3, 5), 13);
    }

    #[test]
    fn masked_softmax_gives_exact_zero_weight_and_grad() {
        let mut g = Graph::new();
        let x = g.param(ndarray::array![[0.3, f64::NEG_INFINITY, 1.1, f64::NEG_INFINITY]]);
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y)[[0, 1]], 0.0);
        assert_eq!(g.value(y)[[0, 3]], 0.0);
        let r = Array2::ones((1, 4));
        let loss = probe(&mut g, y, &r);
        g.backward(loss);
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[[0, 1]], 0.0);
        assert_eq!(gx[[0, 3]], 0.0);
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let gamma = randn(&mut rng, 1, 6);
        let beta = randn(&mut rng, 1, 6);
        check_unary(
            move |g, x| {
                let ga = g.leaf(gamma.clone());
                let be = g.leaf(beta.clone());
                g.layer_norm(x, ga, be)
            },
            randn(&mut rng, 3, 6),
            14,
        );
    }

    #[test]
    fn layer_norm_param_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = randn(&mut rng, 3, 6);
        check_unary(
            move |g, p| {
                let gamma = g.slice_cols(p, 0, 6);
                let beta = g.slice_cols(p, 6, 6);
                let xl = g.leaf(x.clone());
                g.layer_norm(xl, gamma, beta)
            },
            randn(&mut rng, 1, 12),
            15,
        );
    }

    #[test]
    fn gelu_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        check_unary(|g, x| g.gelu(x), randn(&mut rng, 3, 4), 16);
    }

    #[test]
    fn gather_concat_slice_grads_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        check_unary(
            |g, x| {
                let gathered = g.gather_rows(x, &[2, 0, 2, 1]);
                let head = g.slice_rows(gathered, 0, 2);
                let tail = g.slice_rows(gathered, 2, 2);
                let swapped = g.concat_rows(&[tail, head]);
                let left = g.slice_cols(swapped, 0, 2);
                let right = g.slice_cols(swapped, 2, 3);
                g.concat_cols(&[right, left])
            },
            randn(&mut rng, 3, 5),
            17,
        );
    }

    #[test]
    fn cross_entropy_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let targets = vec![1, 0, 3];
        let mask = vec![true, false, true];
        let input = randn(&mut rng, 3, 4);
        let eval = |inp: &Array2<f64>| {
            let mut g = Graph::new();
            let x = g.param(inp.clone());
            let l = g.cross_entropy_mean(x, &targets, &mask);
            (g.scalar(l), {
                g.backward(l);
                g.grad(x).unwrap().clone()
            })
        };
        let (_, analytic) = eval(&input);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut plus = input.clone();
                plus[[i, j]] += eps;
                let mut minus = input.clone();
                minus[[i, j]] -= eps;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic[[i, j]];
                assert!(
                    (a - num).abs() <= 1e-7 + 1e-5 * num.abs().max(a.abs()),
                    "ce grad mismatch at ({i},{j})"
                );
            }
        }
        // Masked-out rows carry no gradient at all.
        assert!(analytic.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let target = randn(&mut rng, 3, 4);
        let weight = Array2::from_shape_fn((3, 4), |(i, _)| if i == 1 { 0.0 } else { 1.0 });
        let input = randn(&mut rng, 3, 4);
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let l = g.mse_mean(x, target.clone(), weight.clone());
        g.backward(l);
        let analytic = g.grad(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let eval = |v: f64| {
                    let mut pert = input.clone();
                    pert[[i, j]] = v;
                    let mut g = Graph::new();
                    let x = g.param(pert);
                    let l = g.mse_mean(x, target.clone(), weight.clone());
                    g.scalar(l)
                };
                let num = (eval(input[[i, j]] + eps) - eval(input[[i, j]] - eps)) / (2.0 * eps);
                let a = analytic[[i, j]];
                assert!((a - num).abs() <= 1e-7 + 1e-5 * a.abs().max(num.abs()));
            }
        }
        assert!(analytic.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_row_mul_broadcast_scale_grads_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let row = randn(&mut rng, 1, 4);
        let factor = randn(&mut rng, 1, 1);
        check_unary(
            move |g, x| {
                let r = g.leaf(row.clone());
                let f = g.leaf(factor.clone());
                let a = g.add_row(x, r);
                let b = g.mul_broadcast(a, f);
                g.scale(b, -1.7)
            },
            randn(&mut rng, 3, 4),
            18,
        );
    }

    #[test]
    fn shared_param_accumulates_both_paths() {
        // y = x . x^T uses the parameter twice; grads must sum both uses.
        let mut g = Graph::new();
        let store = ndarray::array![[1.0_f64, 2.0], [3.0, 4.0]];
        let x = g.param_named("w", &store);
        let x2 = g.param_named("w", &store);
        assert_eq!(x, x2);
        let xt = g.transpose(x2);
        let y = g.matmul(x, xt);
        let r = Array2::ones((2, 2));
        let loss = probe(&mut g, y, &r);
        g.backward(loss);
        // d/dX sum(X X^T) = 2 * ones . X
        let expected = ndarray::array![[8.0, 12.0], [8.0, 12.0]];
        let got = g.grad(x).unwrap();
        assert_eq!(got, &expected);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let x = g.param(ndarray::array![[0.5_f64, -0.25]]);
        let y = g.gelu(x);
        let l = g.mse_mean(y, Array2::zeros((1, 2)), Array2::ones((1, 2)));
        g.backward(l);
        let first = g.grad(x).unwrap().clone();
        g.backward(l);
        assert_eq!(&first, g.grad(x).unwrap());
    }
}
