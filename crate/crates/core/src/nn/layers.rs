//! Reusable layers. Each layer only holds [`ParamId`]s; values live in the
//! [`ParamStore`] the graph was built over.

use serde::{Deserialize, Serialize};

use super::init::{uniform, xavier, ModelRng};
use super::params::{ParamId, ParamStore};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ModelRng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(in_dim, out_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    pub num: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num: usize,
        dim: usize,
        rng: &mut ModelRng,
    ) -> Self {
        Self::with_bound(store, name, num, dim, 0.1, rng)
    }

    /// Table initialized uniformly in `[-bound, bound]`.
    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        num: usize,
        dim: usize,
        bound: f64,
        rng: &mut ModelRng,
    ) -> Self {
        let table = store.add(format!("{name}.table"), uniform(num, dim, bound, rng));
        Self { table, num, dim }
    }

    pub fn lookup(&self, g: &mut Graph, indices: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, indices)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Standard LSTM cell with fused gate projections (order: i, f, g, o).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(input, 4 * hidden, rng));
        let u = store.add(format!("{name}.u"), xavier(hidden, 4 * hidden, rng));
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for c in hidden..2 * hidden {
            bias.set(0, c, 1.0);
        }
        let b = store.add(format!("{name}.b"), bias);
        Self { w, u, b, hidden }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let pre = g.add(xw, hu);
        let pre = g.add_row(pre, b);
        let i = g.slice_cols(pre, 0, hd);
        let i = g.sigmoid(i);
        let f = g.slice_cols(pre, hd, hd);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(pre, 2 * hd, hd);
        let cand = g.tanh(cand);
        let o = g.slice_cols(pre, 3 * hd, hd);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let c_new = g.add(fc, ic);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }

    /// Runs over the rows of `xs` and returns all hidden states (`n × hidden`).
    pub fn run(&self, g: &mut Graph, xs: Var, reverse: bool) -> Var {
        let n = g.value(xs).rows();
        let mut h = g.constant(Tensor::zeros(1, self.hidden));
        let mut c = g.constant(Tensor::zeros(1, self.hidden));
        let mut outs = vec![h; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let x = g.row(xs, t);
            (h, c) = self.step(g, x, h, c);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

/// Bidirectional LSTM; output row `t` is `[forward_t ; backward_t]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: LstmCell,
    bwd: LstmCell,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ModelRng,
    ) -> Self {
        Self {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, xs: Var) -> Var {
        let f = self.fwd.run(g, xs, false);
        let b = self.bwd.run(g, xs, true);
        g.concat_cols(&[f, b])
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    w: ParamId,
    u: ParamId,
    bw: ParamId,
    bu: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ModelRng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(input, 3 * hidden, rng)),
            u: store.add(format!("{name}.u"), xavier(hidden, 3 * hidden, rng)),
            bw: store.add(format!("{name}.bw"), Tensor::zeros(1, 3 * hidden)),
            bu: store.add(format!("{name}.bu"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w, u, bw, bu) = (
            g.param(self.w),
            g.param(self.u),
            g.param(self.bw),
            g.param(self.bu),
        );
        let xw = g.matmul(x, w);
        let xw = g.add_row(xw, bw);
        let hu = g.matmul(h, u);
        let hu = g.add_row(hu, bu);
        let xr = g.slice_cols(xw, 0, hd);
        let hr = g.slice_cols(hu, 0, hd);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let xz = g.slice_cols(xw, hd, hd);
        let hz = g.slice_cols(hu, hd, hd);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let xn = g.slice_cols(xw, 2 * hd, hd);
        let hn = g.slice_cols(hu, 2 * hd, hd);
        let rhn = g.mul(r, hn);
        let n = g.add(xn, rhn);
        let n = g.tanh(n);
        // h' = (1 - z) * n + z * h
        let one_minus_z = g.one_minus(z);
        let a = g.mul(one_minus_z, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V`, optionally restricted by a row-major mask.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Var {
    let dk = g.value(k).cols() as f64;
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / dk.sqrt());
    let weights = match mask {
        Some(m) => g.masked_softmax_rows(scores, m),
        None => g.softmax_rows(scores),
    };
    g.matmul(weights, v)
}

/// Lower-triangular (inclusive) `n × n` mask.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ModelRng,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must divide into heads");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, mask: Option<&[bool]>) -> Var {
        let q = self.wq.forward(g, query);
        let k = self.wk.forward(g, memory);
        let v = self.wv.forward(g, memory);
        let hd = self.wq.out_dim / self.heads;
        let outs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, hd);
                let kh = g.slice_cols(k, h * hd, hd);
                let vh = g.slice_cols(v, h * hd, hd);
                attention(g, qh, kh, vh, mask)
            })
            .collect();
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.wo.forward(g, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ModelRng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Pre-norm transformer decoder block: causal self-attention, cross-attention
/// over a memory, position-wise feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ModelRng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: &[bool]) -> Var {
        let n = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, n, n, Some(causal));
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let a = self.cross_attn.forward(g, n, memory, None);
        let x = g.add(x, a);
        let n = self.ln3.forward(g, x);
        let f = self.ffn.forward(g, n);
        g.add(x, f)
    }
}

/// Pre-norm transformer encoder block (unmasked self-attention).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ModelRng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n, n, None);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, n);
        g.add(x, f)
    }
}

/// Output nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::tensor::sigmoid(x),
            Activation::Identity => x,
        }
    }
}
