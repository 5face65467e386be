//! Graph-attention tree encoders.
//!
//! Attention for node `i` runs over its tree neighbours plus itself:
//! `e_ij = (W z_i)(W z_j)ᵀ`, `α_i· = softmax` over that neighbourhood, and
//! the output is `σ(mean_heads Σ_j α_ij W z_j)`. Node outputs are pooled into
//! one tree vector.
//!
//! Two node-feature schemes are provided. Generated trees use the rows of
//! their adjacency matrix, zero-padded to [`MAX_NODES`] columns. Parsed trees
//! concatenate a sentence part (a leaf's sentence embedding, or the mean of
//! its children's for internal nodes) with a learned depth embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::nn::init::{xavier, ModelRng};
use crate::nn::{Activation, Embedding, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::treelib::{
    adjacency_vector_to_tree, node_depths, tree_to_adjacency_matrix, AdjacencyVector,
    SentenceTree, TreeError, MAX_NODES,
};

#[derive(Debug, Error)]
pub enum TreeEncError {
    #[error("adjacency matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("tree has {leaves} leaves but {embeddings} sentence embeddings were given")]
    LeafCount { leaves: usize, embeddings: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub heads: usize,
    pub out_dim: usize,
    /// Stacked attention passes.
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pooling: Pooling,
}

fn one() -> usize {
    1
}

impl GatConfig {
    pub fn new(heads: usize, out_dim: usize) -> Self {
        Self {
            heads,
            out_dim,
            layers: 1,
            activation: Activation::Tanh,
            pooling: Pooling::Mean,
        }
    }
}

/// One multi-head graph-attention layer.
#[derive(Debug, Clone)]
pub struct GatParams {
    heads: Vec<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Self-inclusive neighbourhood mask of a square adjacency matrix.
pub fn neighbourhood_mask(adj: &Tensor) -> Result<Vec<bool>, TreeEncError> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(TreeEncError::SizeMismatch(format!(
            "adjacency is {}x{}",
            n,
            adj.cols()
        )));
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if adj.get(i, j) != adj.get(j, i) {
                return Err(TreeEncError::Asymmetric(i, j));
            }
            mask[i * n + j] = i == j || adj.get(i, j) != 0.0;
        }
    }
    Ok(mask)
}

impl GatParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        activation: Activation,
        rng: &mut ModelRng,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| store.add(format!("{name}.w{h}"), xavier(in_dim, out_dim, rng)))
            .collect();
        Self {
            heads,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Attention weights of every head (`n × n` each).
    pub fn attention(&self, g: &mut Graph, z: Var, mask: &[bool]) -> Vec<Var> {
        self.heads
            .iter()
            .map(|&w| {
                let w = g.param(w);
                let wz = g.matmul(z, w);
                let e = g.matmul_t(wz, wz);
                g.masked_softmax_rows(e, mask)
            })
            .collect()
    }

    /// Node outputs (`n × out_dim`) for node features `z` (`n × in_dim`).
    pub fn forward(&self, g: &mut Graph, z: Var, mask: &[bool]) -> Var {
        let mut acc: Option<Var> = None;
        for &w in &self.heads {
            let w = g.param(w);
            let wz = g.matmul(z, w);
            let e = g.matmul_t(wz, wz);
            let alpha = g.masked_softmax_rows(e, mask);
            let out = g.matmul(alpha, wz);
            acc = Some(match acc {
                Some(a) => g.add(a, out),
                None => out,
            });
        }
        let sum = acc.expect("at least one head");
        let mean = g.scale(sum, 1.0 / self.heads.len() as f64);
        self.activation.apply(g, mean)
    }
}

/// Checked single-layer evaluation outside training.
pub fn gat_layer(
    store: &ParamStore,
    params: &GatParams,
    feats: &Tensor,
    adjacency: &Tensor,
) -> Result<Tensor, TreeEncError> {
    let mask = neighbourhood_mask(adjacency)?;
    if feats.rows() != adjacency.rows() || feats.cols() != params.in_dim {
        return Err(TreeEncError::SizeMismatch(format!(
            "features are {}x{}, expected {}x{}",
            feats.rows(),
            feats.cols(),
            adjacency.rows(),
            params.in_dim
        )));
    }
    let mut g = Graph::with_params(store);
    let z = g.constant(feats.clone());
    let out = params.forward(&mut g, z, &mask);
    Ok(g.value(out).clone())
}

fn pool(g: &mut Graph, nodes: Var, pooling: Pooling) -> Var {
    match pooling {
        Pooling::Mean => g.mean_rows(nodes),
        Pooling::Root => g.row(nodes, 0),
    }
}

fn stack(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    cfg: &GatConfig,
    rng: &mut ModelRng,
) -> Vec<GatParams> {
    (0..cfg.layers.max(1))
        .map(|l| {
            let d = if l == 0 { in_dim } else { cfg.out_dim };
            GatParams::new(store, &format!("{name}.gat{l}"), d, cfg.out_dim, cfg.heads, cfg.activation, rng)
        })
        .collect()
}

/// Encoder for decoded trees; node features are padded adjacency rows.
#[derive(Debug, Clone)]
pub struct GeneratedTreeEncoder {
    pub config: GatConfig,
    layers: Vec<GatParams>,
}

impl GeneratedTreeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: GatConfig, rng: &mut ModelRng) -> Self {
        let layers = stack(store, name, MAX_NODES, &config, rng);
        Self { config, layers }
    }

    pub fn node_features(tree: &SentenceTree) -> (Tensor, Tensor) {
        let adj = tree_to_adjacency_matrix(tree);
        let n = adj.rows();
        let mut z = Tensor::zeros(n, MAX_NODES);
        for i in 0..n {
            z.row_mut(i)[..n].copy_from_slice(adj.row(i));
        }
        (z, adj)
    }

    /// `F_tree` (`1 × out_dim`) as a graph node.
    pub fn encode(&self, g: &mut Graph, v: &AdjacencyVector) -> Result<Var, TreeEncError> {
        v.check_tree_valid()?;
        let tree = adjacency_vector_to_tree(v)?;
        let (z, adj) = Self::node_features(&tree);
        let mask = neighbourhood_mask(&adj)?;
        let mut h = g.constant(z);
        for layer in &self.layers {
            h = layer.forward(g, h, &mask);
        }
        Ok(pool(g, h, self.config.pooling))
    }

    pub fn embed_generated_tree(
        &self,
        store: &ParamStore,
        v: &AdjacencyVector,
    ) -> Result<Vec<f64>, TreeEncError> {
        let mut g = Graph::with_params(store);
        let out = self.encode(&mut g, v)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Sentence part of every node: a leaf's sentence embedding, or the mean of
/// its children's for internal nodes.
pub fn node_sentence_features(
    tree: &SentenceTree,
    sentence_embs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, TreeEncError> {
    check_leaves(tree, sentence_embs.len())?;
    let nodes = tree.nodes();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
    for i in (0..nodes.len()).rev() {
        out[i] = match nodes[i].leaf {
            Some(s) if nodes[i].children.is_empty() => sentence_embs[s].clone(),
            _ => {
                let k = nodes[i].children.len() as f64;
                let mut acc = vec![0.0; out[nodes[i].children[0]].len()];
                for &c in &nodes[i].children {
                    for (a, x) in acc.iter_mut().zip(&out[c]) {
                        *a += x / k;
                    }
                }
                acc
            }
        };
    }
    Ok(out)
}

fn check_leaves(tree: &SentenceTree, embeddings: usize) -> Result<(), TreeEncError> {
    let leaves = tree.num_leaves();
    if leaves != embeddings {
        return Err(TreeEncError::LeafCount { leaves, embeddings });
    }
    Ok(())
}

/// Encoder for parsed trees over sentence embeddings.
#[derive(Debug, Clone)]
pub struct ParsedTreeEncoder {
    pub config: GatConfig,
    pub sentence_dim: usize,
    pub depth_dim: usize,
    depth: Embedding,
    layers: Vec<GatParams>,
}

impl ParsedTreeEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sentence_dim: usize,
        depth_dim: usize,
        config: GatConfig,
        rng: &mut ModelRng,
    ) -> Self {
        let depth = Embedding::new(store, &format!("{name}.depth"), MAX_NODES, depth_dim, rng);
        let layers = stack(store, name, sentence_dim + depth_dim, &config, rng);
        Self {
            config,
            sentence_dim,
            depth_dim,
            depth,
            layers,
        }
    }

    /// Node features `[f_sen, f_depth]` (`n × (sentence_dim + depth_dim)`).
    pub fn node_features(
        &self,
        g: &mut Graph,
        tree: &SentenceTree,
        sentence_embs: Var,
    ) -> Result<Var, TreeEncError> {
        check_leaves(tree, g.value(sentence_embs).rows())?;
        let nodes = tree.nodes();
        let mut feats: Vec<Option<Var>> = vec![None; nodes.len()];
        for i in (0..nodes.len()).rev() {
            let v = match nodes[i].leaf {
                Some(s) if nodes[i].children.is_empty() => g.row(sentence_embs, s),
                _ => {
                    let kids: Vec<Var> = nodes[i]
                        .children
                        .iter()
                        .map(|&c| feats[c].expect("children come after parents"))
                        .collect();
                    let rows = g.concat_rows(&kids);
                    g.mean_rows(rows)
                }
            };
            feats[i] = Some(v);
        }
        let feats: Vec<Var> = feats.into_iter().map(|f| f.expect("all nodes visited")).collect();
        let sen = g.concat_rows(&feats);
        let depths: Vec<usize> = node_depths(tree).into_iter().map(|d| d.min(MAX_NODES - 1)).collect();
        let dep = self.depth.lookup(g, &depths);
        Ok(g.concat_cols(&[sen, dep]))
    }

    /// `F_tree` (`1 × out_dim`) as a graph node.
    pub fn encode(
        &self,
        g: &mut Graph,
        tree: &SentenceTree,
        sentence_embs: Var,
    ) -> Result<Var, TreeEncError> {
        let z = self.node_features(g, tree, sentence_embs)?;
        let mask = neighbourhood_mask(&tree_to_adjacency_matrix(tree))?;
        let mut h = z;
        for layer in &self.layers {
            h = layer.forward(g, h, &mask);
        }
        Ok(pool(g, h, self.config.pooling))
    }

    pub fn embed_parsed_tree(
        &self,
        store: &ParamStore,
        tree: &SentenceTree,
        sentence_embs: &[Vec<f64>],
    ) -> Result<Vec<f64>, TreeEncError> {
        check_leaves(tree, sentence_embs.len())?;
        if sentence_embs.iter().any(|e| e.len() != self.sentence_dim) {
            return Err(TreeEncError::SizeMismatch(format!(
                "sentence embeddings must have dimension {}",
                self.sentence_dim
            )));
        }
        let mut g = Graph::with_params(store);
        let s = g.constant(Tensor::from_rows(sentence_embs));
        let out = self.encode(&mut g, tree, s)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_inputs;
    use crate::nn::init::{rng, uniform};
    use crate::treelib::{random_parents, Shape};
    use rand::Rng;

    fn star(n: usize) -> Tensor {
        let mut a = Tensor::zeros(n, n);
        for j in 1..n {
            a.set(0, j, 1.0);
            a.set(j, 0, 1.0);
        }
        a
    }

    fn layer(in_dim: usize, out_dim: usize, heads: usize, seed: u64) -> (ParamStore, GatParams) {
        let mut store = ParamStore::new();
        let p = GatParams::new(&mut store, "g", in_dim, out_dim, heads, Activation::Tanh, &mut rng(seed));
        (store, p)
    }

    #[test]
    fn identical_features_on_a_star_give_uniform_attention() {
        let (store, p) = layer(3, 4, 2, 0);
        let adj = star(5);
        let mask = neighbourhood_mask(&adj).unwrap();
        let mut g = Graph::with_params(&store);
        let z = g.constant(Tensor::full(5, 3, 0.7));
        for a in p.attention(&mut g, z, &mask) {
            let a = g.value(a);
            for j in 0..5 {
                assert!((a.get(0, j) - 0.2).abs() < 1e-12);
            }
            for i in 1..5 {
                assert!((a.get(i, 0) - 0.5).abs() < 1e-12);
                assert!((a.get(i, i) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_outputs_activation_of_projection() {
        let (store, p) = layer(3, 2, 1, 1);
        let z = Tensor::row_vector(vec![0.3, -0.6, 1.1]);
        let out = gat_layer(&store, &p, &z, &Tensor::zeros(1, 1)).unwrap();
        let w = store.get(p.heads[0]);
        let expect = z.matmul(w).map(f64::tanh);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_ignore_features_outside_the_neighbourhood() {
        let (store, p) = layer(4, 3, 3, 2);
        let tree = SentenceTree::from_parents(&[0, 0, 1, 1, 2]).unwrap();
        let adj = tree_to_adjacency_matrix(&tree);
        let mut r = rng(5);
        let z = uniform(6, 4, 1.0, &mut r);
        let base = gat_layer(&store, &p, &z, &adj).unwrap();
        // Node 3's neighbourhood is {1, 3}; perturb everything else.
        let mut z2 = z.clone();
        for i in [0, 2, 4, 5] {
            for c in 0..4 {
                z2.set(i, c, r.gen_range(-3.0..3.0));
            }
        }
        let moved = gat_layer(&store, &p, &z2, &adj).unwrap();
        assert_eq!(base.row(3), moved.row(3));
        // Brute-force dense attention restricted to the neighbourhood.
        let mut expect = vec![0.0; 3];
        for &w in &p.heads {
            let wz = z.matmul(store.get(w));
            let nb = [1usize, 3];
            let e: Vec<f64> = nb.iter().map(|&j| crate::tensor::dot(wz.row(3), wz.row(j))).collect();
            let a = crate::tensor::softmax(&e);
            for (k, &j) in nb.iter().enumerate() {
                for c in 0..3 {
                    expect[c] += a[k] * wz.get(j, c) / 3.0;
                }
            }
        }
        for c in 0..3 {
            assert!((base.get(3, c) - expect[c].tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_and_mismatched_inputs_are_rejected() {
        let (store, p) = layer(2, 2, 1, 0);
        let mut a = Tensor::zeros(2, 2);
        a.set(0, 1, 1.0);
        assert!(matches!(
            gat_layer(&store, &p, &Tensor::zeros(2, 2), &a),
            Err(TreeEncError::Asymmetric(0, 1))
        ));
        assert!(gat_layer(&store, &p, &Tensor::zeros(3, 2), &star(2)).is_err());
    }

    #[test]
    fn gat_layer_passes_gradcheck() {
        let (store, p) = layer(3, 4, 2, 7);
        let adj = tree_to_adjacency_matrix(&SentenceTree::from_parents(&[0, 0, 1, 1, 3]).unwrap());
        let mask = neighbourhood_mask(&adj).unwrap();
        let z = uniform(6, 3, 1.0, &mut rng(8));
        let err = crate::nn::gradcheck::check_params(&store, 12, |g| {
            let zv = g.constant(z.clone());
            let out = p.forward(g, zv, &mask);
            let sq = g.mul(out, out);
            g.sum_all(sq)
        });
        assert!(err < 1e-4, "param error {err}");
        let err = check_inputs(&[z.clone()], |g, v| {
            let w = g.constant(store.get(p.heads[0]).clone());
            let wz = g.matmul(v[0], w);
            let e = g.matmul_t(wz, wz);
            let a = g.masked_softmax_rows(e, &mask);
            let o = g.matmul(a, wz);
            let o = g.tanh(o);
            g.sum_all(o)
        });
        assert!(err < 1e-4, "input error {err}");
    }

    #[test]
    fn generated_encoder_output_has_configured_dim_and_separates_shapes() {
        let mut store = ParamStore::new();
        let enc = GeneratedTreeEncoder::new(&mut store, "t", GatConfig::new(6, 512), &mut rng(3));
        let edge = AdjacencyVector::from_parents(&[0]).unwrap();
        let comb_tree = SentenceTree::from_shape(&(1..19).fold(Shape::Leaf(0), |acc, i| {
            Shape::node([acc, Shape::Leaf(i)])
        }));
        let comb = crate::treelib::tree_to_adjacency_vector(&comb_tree);
        let a = enc.embed_generated_tree(&store, &edge).unwrap();
        let b = enc.embed_generated_tree(&store, &comb).unwrap();
        assert_eq!(a.len(), 512);
        assert_ne!(a, b);
        assert_eq!(a, enc.embed_generated_tree(&store, &edge).unwrap());
        let bad = AdjacencyVector::from_blocks(vec![vec![0]]).unwrap();
        assert!(enc.embed_generated_tree(&store, &bad).is_err());
    }

    #[test]
    fn internal_nodes_average_their_children() {
        let tree: SentenceTree = "((0 1) (2 (3 4)))".parse().unwrap();
        let mut r = rng(4);
        let embs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let feats = node_sentence_features(&tree, &embs).unwrap();
        for (i, n) in tree.nodes().iter().enumerate() {
            if n.children.is_empty() {
                continue;
            }
            for c in 0..3 {
                let mean: f64 = n.children.iter().map(|&k| feats[k][c]).sum::<f64>() / n.children.len() as f64;
                assert!((feats[i][c] - mean).abs() < 1e-6);
            }
        }
        // The graph path agrees with the direct computation.
        let mut store = ParamStore::new();
        let enc = ParsedTreeEncoder::new(&mut store, "p", 3, 2, GatConfig::new(8, 4), &mut rng(0));
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::from_rows(&embs));
        let z = enc.node_features(&mut g, &tree, s).unwrap();
        for (i, f) in feats.iter().enumerate() {
            for c in 0..3 {
                assert!((g.value(z).get(i, c) - f[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parsed_encoder_handles_single_leaf_and_scaling() {
        let mut store = ParamStore::new();
        let enc = ParsedTreeEncoder::new(&mut store, "p", 3, 2, GatConfig::new(8, 4), &mut rng(0));
        let single = SentenceTree::single_leaf();
        let out = enc.embed_parsed_tree(&store, &single, &[vec![0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(out.len(), 4);
        assert!(matches!(
            enc.embed_parsed_tree(&store, &single, &[vec![0.0; 3], vec![0.0; 3]]),
            Err(TreeEncError::LeafCount { .. })
        ));
        let mut r = rng(1);
        for _ in 0..20 {
            let n = r.gen_range(2..10);
            let tree = SentenceTree::from_parents(&random_parents(n, &mut r)).unwrap();
            let m = tree.num_leaves();
            let embs = uniform(m, 3, 1.0, &mut r);
            let mask = neighbourhood_mask(&tree_to_adjacency_matrix(&tree)).unwrap();
            for scale in [1.0, 2.0] {
                let mut g = Graph::with_params(&store);
                let mut e = embs.clone();
                e.scale_in_place(scale);
                let s = g.constant(e);
                let z = enc.node_features(&mut g, &tree, s).unwrap();
                for a in enc.layers[0].attention(&mut g, z, &mask) {
                    let a = g.value(a);
                    for i in 0..a.rows() {
                        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
