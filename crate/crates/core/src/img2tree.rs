//! Image-conditioned autoregressive tree generation.
//!
//! Trees are emitted one adjacency block at a time. Step `i` (for node `i`,
//! `i ≥ 1`) consumes the previous block (zero-padded to [`MAX_NODES`]), a
//! start flag and the step fraction `i / MAX_NODES`, and its head produces
//! `MAX_NODES` link logits (only the first `i` are used) plus one
//! continuation logit meaning "node `i` exists". The recurrent state of every
//! layer starts at `tanh(Linear(f_img))`.
//!
//! Loss for an `n`-node tree: binary cross-entropy over every entry of blocks
//! `1..n`, plus continuation targets `1` for steps `1..n` and `0` for step
//! `n` (omitted when `n` is already [`MAX_NODES`]).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::nn::init::{rng, ModelRng};
use crate::nn::{Adam, GruCell, Linear, ParamGrads, ParamStore};
use crate::tensor::{sigmoid, Tensor};
use crate::treelib::{AdjacencyVector, TreeError, MAX_NODES};

const INPUT_DIM: usize = MAX_NODES + 2;

#[derive(Debug, Error)]
pub enum Img2TreeError {
    #[error("image feature has dimension {found}, expected {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("tree has {0} nodes, more than the maximum of {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("max_nodes must be in [1, {MAX_NODES}], got {0}")]
    BadMaxNodes(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RnnKind {
    #[default]
    Gru,
    /// `h' = tanh(x W + h U + b)`
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeGenConfig {
    pub image_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    #[serde(default)]
    pub cell: RnnKind,
}

impl TreeGenConfig {
    pub fn desk(image_dim: usize) -> Self {
        Self {
            image_dim,
            hidden: 64,
            layers: 2,
            cell: RnnKind::Gru,
        }
    }

    pub fn paper(image_dim: usize) -> Self {
        Self {
            image_dim,
            hidden: 512,
            layers: 2,
            cell: RnnKind::Gru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Argmax,
    Sample,
}

#[derive(Debug, Clone)]
enum Cell {
    Gru(GruCell),
    Plain { x: Linear, h: Linear },
}

impl Cell {
    fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        match self {
            Cell::Gru(c) => c.step(g, x, h),
            Cell::Plain { x: wx, h: wh } => {
                let a = wx.forward(g, x);
                let b = wh.forward(g, h);
                let s = g.add(a, b);
                g.tanh(s)
            }
        }
    }
}

/// Tree generator layers; parameter values live in a shared store.
#[derive(Debug, Clone)]
pub struct TreeGenerator {
    pub config: TreeGenConfig,
    init: Vec<Linear>,
    cells: Vec<Cell>,
    head: Linear,
}

/// One teacher-forced step: link logits (`1 × i`) and continuation logit.
struct StepOut {
    links: Var,
    cont: Var,
}

impl TreeGenerator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: TreeGenConfig,
        rng: &mut ModelRng,
    ) -> Result<Self, Img2TreeError> {
        if config.image_dim == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Img2TreeError::InvalidConfig(
                "image_dim, hidden and layers must be positive".into(),
            ));
        }
        let h = config.hidden;
        let mut init = Vec::with_capacity(config.layers);
        let mut cells = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            init.push(Linear::new(
                store,
                &format!("{name}.init{l}"),
                config.image_dim,
                h,
                true,
                rng,
            ));
            let input = if l == 0 { INPUT_DIM } else { h };
            cells.push(match config.cell {
                RnnKind::Gru => Cell::Gru(GruCell::new(store, &format!("{name}.gru{l}"), input, h, rng)),
                RnnKind::Plain => Cell::Plain {
                    x: Linear::new(store, &format!("{name}.rnn{l}.x"), input, h, true, rng),
                    h: Linear::new(store, &format!("{name}.rnn{l}.h"), h, h, false, rng),
                },
            });
        }
        let head = Linear::new(store, &format!("{name}.head"), h, MAX_NODES + 1, true, rng);
        Ok(Self {
            config,
            init,
            cells,
            head,
        })
    }

    fn check_feature(&self, f: &[f64]) -> Result<(), Img2TreeError> {
        if f.len() != self.config.image_dim {
            return Err(Img2TreeError::FeatureDim {
                expected: self.config.image_dim,
                found: f.len(),
            });
        }
        Ok(())
    }

    fn initial_state(&self, g: &mut Graph, f_img: Var) -> Vec<Var> {
        self.init
            .iter()
            .map(|lin| {
                let z = lin.forward(g, f_img);
                g.tanh(z)
            })
            .collect()
    }

    /// Input row for step `i` given the previous block (`None` at step 1).
    fn step_input(i: usize, prev: Option<&[u8]>) -> Tensor {
        let mut x = Tensor::zeros(1, INPUT_DIM);
        match prev {
            Some(b) => {
                for (k, &v) in b.iter().enumerate() {
                    x.set(0, k, f64::from(v));
                }
            }
            None => x.set(0, MAX_NODES, 1.0),
        }
        x.set(0, MAX_NODES + 1, i as f64 / MAX_NODES as f64);
        x
    }

    fn step(&self, g: &mut Graph, state: &mut [Var], i: usize, prev: Option<&[u8]>) -> StepOut {
        let mut x = g.constant(Self::step_input(i, prev));
        for (cell, h) in self.cells.iter().zip(state.iter_mut()) {
            *h = cell.step(g, x, *h);
            x = *h;
        }
        let out = self.head.forward(g, x);
        StepOut {
            links: g.slice_cols(out, 0, i.min(MAX_NODES)),
            cont: g.slice_cols(out, MAX_NODES, 1),
        }
    }

    /// Per-step loss nodes of the teacher-forced factorization.
    fn step_losses(&self, g: &mut Graph, f_img: Var, v: &AdjacencyVector) -> Vec<Var> {
        let n = v.num_nodes();
        let blocks = v.blocks();
        let mut state = self.initial_state(g, f_img);
        let last = if n < MAX_NODES { n } else { n - 1 };
        let mut losses = Vec::with_capacity(last);
        for i in 1..=last {
            let prev = if i == 1 { None } else { Some(blocks[i - 2].as_slice()) };
            let out = self.step(g, &mut state, i, prev);
            let exists = i < n;
            let c = g.bce_with_logits(out.cont, Tensor::full(1, 1, if exists { 1.0 } else { 0.0 }));
            let loss = if exists {
                let target = Tensor::row_vector(blocks[i - 1].iter().map(|&b| f64::from(b)).collect());
                let e = g.bce_with_logits(out.links, target);
                g.add(e, c)
            } else {
                c
            };
            losses.push(loss);
        }
        losses
    }

    fn validate_target(&self, v: &AdjacencyVector) -> Result<(), Img2TreeError> {
        v.check_tree_valid()?;
        if v.num_nodes() > MAX_NODES {
            return Err(Img2TreeError::TooManyNodes(v.num_nodes()));
        }
        Ok(())
    }

    /// Teacher-forced negative log-likelihood as a graph node.
    pub fn nll(&self, g: &mut Graph, f_img: Var, v: &AdjacencyVector) -> Result<Var, Img2TreeError> {
        self.validate_target(v)?;
        let losses = self.step_losses(g, f_img, v);
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        Ok(total)
    }

    pub fn tree_nll(
        &self,
        store: &ParamStore,
        f_img: &[f64],
        v: &AdjacencyVector,
    ) -> Result<f64, Img2TreeError> {
        self.check_feature(f_img)?;
        let mut g = Graph::with_params(store);
        let f = g.constant(Tensor::row_vector(f_img.to_vec()));
        let l = self.nll(&mut g, f, v)?;
        Ok(g.scalar(l))
    }

    /// Loss of each step, in order; they sum to [`Self::tree_nll`].
    pub fn tree_nll_per_step(
        &self,
        store: &ParamStore,
        f_img: &[f64],
        v: &AdjacencyVector,
    ) -> Result<Vec<f64>, Img2TreeError> {
        self.check_feature(f_img)?;
        self.validate_target(v)?;
        let mut g = Graph::with_params(store);
        let f = g.constant(Tensor::row_vector(f_img.to_vec()));
        let losses = self.step_losses(&mut g, f, v);
        Ok(losses.iter().map(|&l| g.scalar(l)).collect())
    }

    /// Decodes a tree; always tree-valid with at most `max_nodes` nodes.
    pub fn generate_tree(
        &self,
        store: &ParamStore,
        f_img: &[f64],
        mode: DecodeMode,
        max_nodes: usize,
        rng: &mut impl Rng,
    ) -> Result<AdjacencyVector, Img2TreeError> {
        self.check_feature(f_img)?;
        if max_nodes == 0 || max_nodes > MAX_NODES {
            return Err(Img2TreeError::BadMaxNodes(max_nodes));
        }
        let mut g = Graph::with_params(store);
        let f = g.constant(Tensor::row_vector(f_img.to_vec()));
        let mut state = self.initial_state(&mut g, f);
        let mut blocks: Vec<Vec<u8>> = Vec::new();
        for i in 1..max_nodes {
            let prev = blocks.last().map(Vec::as_slice);
            let out = self.step(&mut g, &mut state, i, prev);
            if sigmoid(g.scalar(out.cont)) < 0.5 {
                break;
            }
            let logits = g.value(out.links).data();
            let parent = match mode {
                DecodeMode::Argmax => {
                    let mut best = 0;
                    for (k, &x) in logits.iter().enumerate() {
                        if x > logits[best] {
                            best = k;
                        }
                    }
                    best
                }
                DecodeMode::Sample => {
                    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
                    let total: f64 = probs.iter().sum();
                    let mut u = rng.gen::<f64>() * total;
                    let mut pick = probs.len() - 1;
                    for (k, p) in probs.iter().enumerate() {
                        if u < *p {
                            pick = k;
                            break;
                        }
                        u -= p;
                    }
                    pick
                }
            };
            let mut block = vec![0u8; i];
            block[parent] = 1;
            blocks.push(block);
        }
        Ok(AdjacencyVector::from_blocks(blocks)?)
    }
}

/// Standalone tree generator with its own parameter store.
#[derive(Debug, Clone)]
pub struct TreeGenParams {
    pub store: ParamStore,
    pub model: TreeGenerator,
}

impl TreeGenParams {
    pub fn new(config: TreeGenConfig, seed: u64) -> Result<Self, Img2TreeError> {
        let mut store = ParamStore::new();
        let model = TreeGenerator::new(&mut store, "tree", config, &mut rng(seed))?;
        Ok(Self { store, model })
    }

    pub fn tree_nll(&self, f_img: &[f64], v: &AdjacencyVector) -> Result<f64, Img2TreeError> {
        self.model.tree_nll(&self.store, f_img, v)
    }

    pub fn generate_tree(
        &self,
        f_img: &[f64],
        mode: DecodeMode,
        max_nodes: usize,
        rng: &mut impl Rng,
    ) -> Result<AdjacencyVector, Img2TreeError> {
        self.model.generate_tree(&self.store, f_img, mode, max_nodes, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for TreeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            clip: Some(5.0),
            seed: 0,
        }
    }
}

/// Fits a tree generator alone with Adam; returns the per-epoch mean loss.
pub fn train_tree_generator(
    items: &[(Vec<f64>, AdjacencyVector)],
    config: TreeGenConfig,
    train: &TreeTrainConfig,
) -> Result<(TreeGenParams, Vec<f64>), Img2TreeError> {
    let mut params = TreeGenParams::new(config, train.seed)?;
    let mut opt = Adam::new(train.lr, train.clip);
    let mut history = Vec::with_capacity(train.epochs);
    let bs = train.batch_size.max(1);
    for _ in 0..train.epochs {
        let mut total = 0.0;
        for chunk in items.chunks(bs) {
            let mut acc = ParamGrads::new(params.store.len());
            for (f, v) in chunk {
                params.model.check_feature(f)?;
                let mut g = Graph::with_params(&params.store);
                let fv = g.constant(Tensor::row_vector(f.clone()));
                let loss = params.model.nll(&mut g, fv, v)?;
                total += g.scalar(loss);
                let grads = g.backward(loss);
                acc.accumulate(&g.param_grads(&grads));
            }
            acc.scale(1.0 / chunk.len() as f64);
            opt.step(&mut params.store, &acc);
        }
        history.push(total / items.len().max(1) as f64);
    }
    Ok((params, history))
}
