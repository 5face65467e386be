//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the recipe for its backward pass. Parameters are bound lazily from a
//! [`ParamStore`] and borrowed rather than copied, so building a graph per
//! training example is cheap. Call [`Graph::backward`] on a `1 × 1` node to
//! obtain gradients for every node that depends on a parameter or on an
//! input created with [`Graph::variable`].

use std::borrow::Cow;

use crate::nn::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, sigmoid, softmax_in_place, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    CumsumRows(Var),
    RepeatCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    CrossEntropy(Var, Vec<usize>, Tensor),
    BceWithLogits(Var, Tensor),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    PairwiseDist(Var, Var),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<'s>>,
    bound: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters; useful for pure functions of inputs.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(256),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.get(0, 0)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input (gradient available through [`Gradients::get`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 × m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 × m` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "mul_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// are exactly zero. A row with no admissible entry is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len(), "mask size mismatch");
        let mut out = Tensor::zeros(av.rows(), av.cols());
        let cols = av.cols();
        for r in 0..av.rows() {
            let m = &mask[r * cols..(r + 1) * cols];
            let row = av.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if m[c] {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            for x in o.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedSoftmaxRows(a), ng)
    }

    /// Running sum along each row.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for c in 1..row.len() {
                row[c] += row[c - 1];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::CumsumRows(a), ng)
    }

    /// Repeats every column `times` times consecutively.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        if times == 1 {
            return a;
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols() * times);
        for r in 0..av.rows() {
            for c in 0..av.cols() {
                for t in 0..times {
                    out.set(r, c * times + t, av.get(r, c));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatCols(a, times), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Embedding lookup: row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(indices.len(), c, data),
            Op::GatherRows(a, indices.to_vec()),
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    /// Mean over rows, giving a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x / n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count mismatch");
        let probs = lv.softmax_rows();
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
        }
        nll /= targets.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![nll]),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            ng,
        )
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce shape mismatch");
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::BceWithLogits(logits, targets),
            ng,
        )
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        let n = av.cols() as f64;
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Scales every row to unit Euclidean norm (`sqrt(|x|² + eps)`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows(a, norms), ng)
    }

    /// `D[i][j] = sqrt(|a_i - b_j|² + 1e-12)`
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pairwise_dist width mismatch");
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let d2: f64 = av
                    .row(i)
                    .iter()
                    .zip(bv.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.set(i, j, (d2 + PAIRWISE_EPS).sqrt());
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::PairwiseDist(a, b), ng)
    }

    /// Selects individual entries into a `k × 1` column.
    pub fn pick(&mut self, a: Var, positions: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let data = positions.iter().map(|&(r, c)| av.get(r, c)).collect();
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(positions.len(), 1, data),
            Op::Pick(a, positions.to_vec()),
            ng,
        )
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, (g, false), (bv, true), 0.0, &mut da);
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, (av, true), (g, false), 0.0, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, (g, false), (bv, false), 0.0, &mut da);
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, (g, true), (av, false), 0.0, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, column_sums(g));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, w) in da.row_mut(r).iter_mut().zip(bv.data()) {
                            *x *= w;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, column_sums(&g.zip_map(av, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Relu(a) => self.acc(grads, *a, g.zip_map(y, |d, o| if o > 0.0 { d } else { 0.0 })),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |d, e| d * e)),
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for (o, (p, d)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (d - inner);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::CumsumRows(a) => {
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let row = da.row_mut(r);
                    for c in (0..row.len().saturating_sub(1)).rev() {
                        row[c] += row[c + 1];
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::RepeatCols(a, times) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for c in 0..av.cols() {
                        let s: f64 = (0..*times).map(|t| g.get(r, c * times + t)).sum();
                        da.set(r, c, s);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        self.acc(grads, p, dp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.ng(p) {
                        let dp =
                            Tensor::from_vec(pr, c, g.data()[off * c..(off + pr) * c].to_vec());
                        self.acc(grads, p, dp);
                    }
                    off += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                da.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.acc(grads, *a, da);
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, d) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += d;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, Tensor::full(av.rows(), av.cols(), g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = av.rows() as f64;
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (o, d) in da.row_mut(r).iter_mut().zip(g.data()) {
                        *o = d / n;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut da = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = da.get(r, t);
                    da.set(r, t, v - 1.0);
                }
                da.scale_in_place(scale);
                self.acc(grads, *logits, da);
            }
            Op::BceWithLogits(logits, targets) => {
                let s = g.get(0, 0);
                let lv = self.value(*logits);
                let da = lv.zip_map(targets, |x, t| s * (sigmoid(x) - t));
                self.acc(grads, *logits, da);
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols() as f64;
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (o, (yy, gg)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = inv_std[r] * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gg - yy * inner) / norms[r];
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::PairwiseDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let w = g.get(i, j) / y.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..av.cols() {
                            let diff = w * (av.get(i, k) - bv.get(j, k));
                            da.row_mut(i)[k] += diff;
                            db.row_mut(j)[k] -= diff;
                        }
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Pick(a, positions) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (k, &(r, c)) in positions.iter().enumerate() {
                    let v = da.get(r, c);
                    da.set(r, c, v + g.get(k, 0));
                }
                self.acc(grads, *a, da);
            }
        }
    }

    /// Collects gradients of every bound parameter.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::new(self.bound.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.get(*v) {
                    out.accumulate_one(ParamId::from_index(i), g);
                }
            }
        }
        out
    }
}

const PAIRWISE_EPS: f64 = 1e-12;

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Softmax used outside the tape (inference and oracles).
pub fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}
