//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its nodes during the
//! forward pass. [`Graph::backward`] then walks the tape in reverse and
//! accumulates gradients for every node flagged as trainable. Nodes hold
//! `Array2<T>`; scalars are `1x1` arrays.
//!
//! The engine is generic over [`Scalar`] so the same forward code can run in
//! `f32` for training and in `f64` for finite-difference verification.

use ndarray::{s, Array2, ScalarOperand};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::ops::Range;

/// Element type for all graph arrays. Implemented for `f32` and `f64`.
pub trait Scalar:
    ndarray::LinalgScalar + Float + ScalarOperand + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Identity of a trainable parameter, assigned by the caller. Gradients are
/// reported per `ParamId` after a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    Exp,
    Ln,
    Sqrt,
    Recip,
    Silu,
    SoftmaxRow,
    LogSumExpRow,
    SumRow,
    MeanRow,
    SumAll,
    MeanAll,
    MulCol,
    MulRow,
    AddRow,
    GatherRows(Vec<usize>),
    GatherIndex(Vec<usize>),
    SliceRows(Range<usize>),
    ConcatRows,
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op,
    parents: Vec<NodeId>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// The tape. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op, parents: Vec<NodeId>) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// Trainable input; its gradient is reported under `id` after backward.
    pub fn param(&mut self, value: Array2<T>, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            needs_grad: true,
            param: Some(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.check_same_shape(a, b, "add");
        self.push(v, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "sub: shape mismatch"
        );
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub, vec![a, b])
    }

    /// Elementwise product of same-shape arrays.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "mul: shape mismatch"
        );
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = T::from_f64(c);
        let v = self.value(a).mapv(|x| x * cc);
        self.push(v, Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = T::from_f64(c);
        let v = self.value(a).mapv(|x| x + cc);
        self.push(v, Op::AddScalar(c), vec![a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, ka) = self.value(a).dim();
        let (kb, _) = self.value(b).dim();
        assert_eq!(ka, kb, "matmul: inner dimensions differ ({ka} vs {kb})");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(Float::exp);
        self.push(v, Op::Exp, vec![a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(Float::ln);
        self.push(v, Op::Ln, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(Float::sqrt);
        self.push(v, Op::Sqrt, vec![a])
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| T::one() / x);
        self.push(v, Op::Recip, vec![a])
    }

    /// SiLU activation: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu, vec![a])
    }

    /// Row-wise softmax, numerically stabilized by the row maximum.
    pub fn softmax_row(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRow, vec![a])
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`, stabilized by the row max.
    pub fn logsumexp_row(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, _) = x.dim();
        let mut v = Array2::zeros((m, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&e| (e - max).exp()).fold(T::zero(), |a, b| a + b);
            v[(i, 0)] = max + sum.ln();
        }
        self.push(v, Op::LogSumExpRow, vec![a])
    }

    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_row(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, _) = x.dim();
        let mut v = Array2::zeros((m, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            v[(i, 0)] = row.sum();
        }
        self.push(v, Op::SumRow, vec![a])
    }

    /// Row means, `[m, n] -> [m, 1]`.
    pub fn mean_row(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dim();
        let nn = T::from_f64(n as f64);
        let mut v = Array2::zeros((m, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            v[(i, 0)] = row.sum() / nn;
        }
        self.push(v, Op::MeanRow, vec![a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = T::from_f64(x.len() as f64);
        let s = x.sum() / n;
        self.push(Array2::from_elem((1, 1), s), Op::MeanAll, vec![a])
    }

    /// Multiply each row of `a` `[m, n]` by the matching entry of the column
    /// vector `c` `[m, 1]`.
    pub fn mul_col(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let x = self.value(a);
        let col = self.value(c);
        assert_eq!(col.dim(), (x.nrows(), 1), "mul_col: column shape mismatch");
        let v = x * col;
        self.push(v, Op::MulCol, vec![a, c])
    }

    /// Multiply each column of `a` `[m, n]` by the matching entry of the row
    /// vector `r` `[1, n]`.
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let x = self.value(a);
        let row = self.value(r);
        assert_eq!(row.dim(), (1, x.ncols()), "mul_row: row shape mismatch");
        let v = x * row;
        self.push(v, Op::MulRow, vec![a, r])
    }

    /// Add the row vector `r` `[1, n]` to every row of `a` `[m, n]`.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let x = self.value(a);
        let row = self.value(r);
        assert_eq!(row.dim(), (1, x.ncols()), "add_row: row shape mismatch");
        let v = x + row;
        self.push(v, Op::AddRow, vec![a, r])
    }

    /// Select rows of `a` by index, with repetition allowed. Gradient
    /// scatter-adds back into the source rows.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut v = Array2::zeros((idx.len(), n));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < m, "gather_rows: index {j} out of range {m}");
            v.row_mut(i).assign(&x.row(j));
        }
        self.push(v, Op::GatherRows(idx.to_vec()), vec![a])
    }

    /// Pick one entry per row: out `[m, 1]` with `out[i] = a[i, idx[i]]`.
    pub fn gather_index(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dim();
        assert_eq!(idx.len(), m, "gather_index: need one index per row");
        let mut v = Array2::zeros((m, 1));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n, "gather_index: column {j} out of range {n}");
            v[(i, 0)] = x[(i, j)];
        }
        self.push(v, Op::GatherIndex(idx.to_vec()), vec![a])
    }

    pub fn slice_rows(&mut self, a: NodeId, range: Range<usize>) -> NodeId {
        let x = self.value(a);
        assert!(range.end <= x.nrows(), "slice_rows: range out of bounds");
        let v = x.slice(s![range.clone(), ..]).to_owned();
        self.push(v, Op::SliceRows(range), vec![a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let n = self.value(parts[0]).ncols();
        let m: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((m, n));
        let mut at = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.ncols(), n, "concat_rows: column count mismatch");
            v.slice_mut(s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        self.push(v, Op::ConcatRows, parts.to_vec())
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Array2<T> {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{op}: shape mismatch"
        );
        self.value(a) + self.value(b)
    }

    /// Reverse pass from a scalar root. Returns one gradient per trainable
    /// parameter that the root depends on.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // keep the grad so params can read it afterwards
            grads[i] = Some(g);
        }

        let mut by_param = std::collections::BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads[i].take() {
                    by_param.insert(pid, g);
                }
            }
        }
        Gradients { by_param }
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let mut accum = |k: usize, contrib: Array2<T>| {
            let pid = node.parents[k].0;
            if !self.nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                accum(0, g.clone());
                accum(1, g.clone());
            }
            Op::Sub => {
                accum(0, g.clone());
                accum(1, g.mapv(|x| -x));
            }
            Op::Mul => {
                accum(0, g * pv(1));
                accum(1, g * pv(0));
            }
            Op::Neg => accum(0, g.mapv(|x| -x)),
            Op::Scale(c) => {
                let cc = T::from_f64(*c);
                accum(0, g.mapv(|x| x * cc));
            }
            Op::AddScalar(_) => accum(0, g.clone()),
            Op::MatMul => {
                accum(0, g.dot(&pv(1).t()));
                accum(1, pv(0).t().dot(g));
            }
            Op::Transpose => accum(0, g.t().to_owned()),
            Op::Exp => accum(0, g * &node.value),
            Op::Ln => accum(0, g / pv(0)),
            Op::Sqrt => {
                let half = T::from_f64(0.5);
                accum(0, g * &node.value.mapv(|y| half / y));
            }
            Op::Recip => accum(0, g * &node.value.mapv(|y| -(y * y))),
            Op::Silu => {
                let dx = pv(0).mapv(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                accum(0, g * &dx);
            }
            Op::SoftmaxRow => {
                // dx = y * (g - rowsum(g * y))
                let y = &node.value;
                let gy = g * y;
                let mut dx = Array2::zeros(y.dim());
                for (r, row_gy) in gy.rows().into_iter().enumerate() {
                    let s = row_gy.sum();
                    for c in 0..y.ncols() {
                        dx[(r, c)] = y[(r, c)] * (g[(r, c)] - s);
                    }
                }
                accum(0, dx);
            }
            Op::LogSumExpRow => {
                let x = pv(0);
                let mut dx = Array2::zeros(x.dim());
                for (r, row) in x.rows().into_iter().enumerate() {
                    let lse = node.value[(r, 0)];
                    let gr = g[(r, 0)];
                    for c in 0..x.ncols() {
                        dx[(r, c)] = gr * (row[c] - lse).exp();
                    }
                }
                accum(0, dx);
            }
            Op::SumRow => {
                let (m, n) = pv(0).dim();
                let mut dx = Array2::zeros((m, n));
                for r in 0..m {
                    let gr = g[(r, 0)];
                    dx.row_mut(r).fill(gr);
                }
                accum(0, dx);
            }
            Op::MeanRow => {
                let (m, n) = pv(0).dim();
                let nn = T::from_f64(n as f64);
                let mut dx = Array2::zeros((m, n));
                for r in 0..m {
                    let gr = g[(r, 0)] / nn;
                    dx.row_mut(r).fill(gr);
                }
                accum(0, dx);
            }
            Op::SumAll => {
                let gs = g[(0, 0)];
                accum(0, Array2::from_elem(pv(0).dim(), gs));
            }
            Op::MeanAll => {
                let gs = g[(0, 0)] / T::from_f64(pv(0).len() as f64);
                accum(0, Array2::from_elem(pv(0).dim(), gs));
            }
            Op::MulCol => {
                let a = pv(0);
                let c = pv(1);
                accum(0, g * c);
                let ga = g * a;
                let (m, _) = a.dim();
                let mut gc = Array2::zeros((m, 1));
                for (r, row) in ga.rows().into_iter().enumerate() {
                    gc[(r, 0)] = row.sum();
                }
                accum(1, gc);
            }
            Op::MulRow => {
                let a = pv(0);
                let r = pv(1);
                accum(0, g * r);
                let ga = g * a;
                let (_, n) = a.dim();
                let mut gr = Array2::zeros((1, n));
                for c in 0..n {
                    gr[(0, c)] = ga.column(c).sum();
                }
                accum(1, gr);
            }
            Op::AddRow => {
                accum(0, g.clone());
                let (_, n) = pv(0).dim();
                let mut gr = Array2::zeros((1, n));
                for c in 0..n {
                    gr[(0, c)] = g.column(c).sum();
                }
                accum(1, gr);
            }
            Op::GatherRows(idx) => {
                let (m, n) = pv(0).dim();
                let mut dx = Array2::zeros((m, n));
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(j);
                    row += &g.row(i);
                }
                accum(0, dx);
            }
            Op::GatherIndex(idx) => {
                let (m, n) = pv(0).dim();
                let mut dx = Array2::zeros((m, n));
                for (i, &j) in idx.iter().enumerate() {
                    dx[(i, j)] = dx[(i, j)] + g[(i, 0)];
                }
                accum(0, dx);
            }
            Op::SliceRows(range) => {
                let (m, n) = pv(0).dim();
                let mut dx = Array2::zeros((m, n));
                dx.slice_mut(s![range.clone(), ..]).assign(g);
                accum(0, dx);
            }
            Op::ConcatRows => {
                let mut at = 0;
                for k in 0..node.parents.len() {
                    let rows = pv(k).nrows();
                    accum(k, g.slice(s![at..at + rows, ..]).to_owned());
                    at += rows;
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Gradients keyed by [`ParamId`], produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    by_param: std::collections::BTreeMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Array2<T>> {
        self.by_param.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<T>)> {
        self.by_param.iter()
    }
}

/// Central finite differences for a scalar function of several arrays.
///
/// Evaluates `f` twice per coordinate with step `h`; no part of the reverse
/// pass is involved, so this is a valid independent oracle for gradients.
pub fn finite_difference<F>(f: F, params: &[Array2<f64>], h: f64) -> Vec<Array2<f64>>
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Array2::zeros(params[pi].dim());
        for ((r, c), slot) in g.indexed_iter_mut() {
            let mut plus = params.to_vec();
            plus[pi][(r, c)] += h;
            let mut minus = params.to_vec();
            minus[pi][(r, c)] -= h;
            *slot = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.5..1.5))
    }

    /// Runs an op through both backward and central differences and compares.
    fn check_grad<F>(build: F, shapes: &[(usize, usize)], seed: u64)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Array2<f64>> = shapes
            .iter()
            .map(|&(m, n)| rand_array(&mut rng, m, n))
            .collect();

        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p.clone(), ParamId(i)))
            .collect();
        let root = build(&mut g, &ids);
        let mut analytic = g.backward(root);

        let numeric = finite_difference(
            |ps| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = ps
                    .iter()
                    .enumerate()
                    .map(|(i, p)| g.param(p.clone(), ParamId(i)))
                    .collect();
                let root = build(&mut g, &ids);
                g.scalar_value(root)
            },
            &params,
            1e-5,
        );

        for (i, num) in numeric.iter().enumerate() {
            let ana = analytic
                .take(ParamId(i))
                .unwrap_or_else(|| Array2::zeros(num.dim()));
            for ((r, c), &nv) in num.indexed_iter() {
                let av = ana[(r, c)];
                let denom = nv.abs().max(av.abs()).max(1e-6);
                assert!(
                    (nv - av).abs() / denom < 1e-6,
                    "param {i} [{r},{c}]: analytic {av} vs numeric {nv}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grad(
            |g, p| {
                let a = g.add(p[0], p[1]);
                let b = g.mul(a, p[0]);
                let c = g.sub(b, p[1]);
                let d = g.neg(c);
                let e = g.scale(d, 0.7);
                let f = g.add_scalar(e, 0.3);
                g.sum_all(f)
            },
            &[(3, 4), (3, 4)],
            1,
        );
    }

    #[test]
    fn grad_matmul_transpose() {
        check_grad(
            |g, p| {
                let t = g.transpose(p[1]);
                let m = g.matmul(p[0], t);
                g.mean_all(m)
            },
            &[(3, 5), (4, 5)],
            2,
        );
    }

    #[test]
    fn grad_exp_ln_sqrt_recip() {
        check_grad(
            |g, p| {
                // shift positive so ln/sqrt are defined
                let a = g.add_scalar(p[0], 3.0);
                let b = g.ln(a);
                let c = g.exp(b);
                let d = g.sqrt(c);
                let e = g.recip(d);
                g.sum_all(e)
            },
            &[(2, 3)],
            3,
        );
    }

    #[test]
    fn grad_silu() {
        check_grad(
            |g, p| {
                let a = g.silu(p[0]);
                g.sum_all(a)
            },
            &[(4, 4)],
            4,
        );
    }

    #[test]
    fn grad_softmax_logsumexp() {
        check_grad(
            |g, p| {
                let sm = g.softmax_row(p[0]);
                let lse = g.logsumexp_row(p[0]);
                let a = g.sum_all(sm);
                let weighted = g.mul(sm, p[0]);
                let b = g.sum_all(weighted);
                let c = g.sum_all(lse);
                let ab = g.add(a, b);
                g.add(ab, c)
            },
            &[(3, 6)],
            5,
        );
    }

    #[test]
    fn grad_row_reductions_and_broadcasts() {
        check_grad(
            |g, p| {
                let sr = g.sum_row(p[0]);
                let mr = g.mean_row(p[0]);
                let mc = g.mul_col(p[0], sr);
                let mc2 = g.mul_col(mc, mr);
                let ar = g.add_row(mc2, p[1]);
                let mrow = g.mul_row(ar, p[1]);
                g.mean_all(mrow)
            },
            &[(3, 4), (1, 4)],
            6,
        );
    }

    #[test]
    fn grad_gather_slice_concat() {
        check_grad(
            |g, p| {
                let gr = g.gather_rows(p[0], &[2, 0, 2, 1]);
                let gi = g.gather_index(gr, &[0, 3, 1, 2]);
                let sl = g.slice_rows(p[0], 1..3);
                let cat = g.concat_rows(&[sl, gr]);
                let a = g.sum_all(cat);
                let b = g.sum_all(gi);
                g.add(a, b)
            },
            &[(4, 4)],
            7,
        );
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(array![[1.0, 2.0], [3.0, 4.0]], ParamId(0));
        let s = g.sum_all(p);
        let mut grads = g.backward(s);
        assert_eq!(grads.take(ParamId(0)).unwrap(), array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(array![[1.0, 2.0]], ParamId(0));
        let zero = g.scale(p, 0.0);
        let s = g.sum_all(zero);
        let mut grads = g.backward(s);
        assert_eq!(grads.take(ParamId(0)).unwrap(), array![[0.0, 0.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(array![[2.0, 3.0]]);
        let p = g.param(array![[1.0, 1.0]], ParamId(0));
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(ParamId(0)).unwrap(), &array![[2.0, 3.0]]);
        assert_eq!(grads.iter().count(), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        let sm = g.softmax_row(x);
        for row in g.value(sm).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_stable_for_large_inputs() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(array![[1000.0f32, 1000.0]]);
        let lse = g.logsumexp_row(x);
        let v = g.value(lse)[(0, 0)];
        assert!((v - (1000.0 + 2.0f32.ln())).abs() < 1e-3);
    }
}
