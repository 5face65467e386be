//! Transformer recipe decoder conditioned on image, ingredient and tree
//! features, the joint generation + tree objective, and greedy decoding.
//!
//! The decoder cross-attends to a memory of slots in a fixed order:
//! `[proj(F_img); one embedding per ingredient; proj(F_tree)]`. The tree
//! slot exists only when the tree branch is [`TreeBranch::Enabled`]. During
//! training `F_tree` encodes the pseudo-label tree; at inference it encodes
//! the tree decoded from the image feature.
//!
//! Decoder parameters are drawn from the run seed before any tree-branch
//! parameter, and the tree branch uses its own random stream. A run with the
//! tree branch zeroed and `λ2 = 0` therefore trains exactly the same decoder
//! as a run without the branch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_ingredient_vocab, build_vocab, encode_recipe, Corpus, CorpusError, Recipe, Vocab, BOS,
    EOS,
};
use crate::graph::{Graph, Var};
use crate::img2tree::{DecodeMode, Img2TreeError, RnnKind, TreeGenConfig, TreeGenerator};
use crate::metrics::{avg_length, bleu, corpus_rouge_l, perplexity, GenEvalResult, MetricsError};
use crate::nn::init::{rng, ModelRng};
use crate::nn::{
    causal_mask, Activation, Adam, DecoderLayer, Embedding, LayerNorm, Linear, LrSchedule,
    ParamGrads, ParamStore,
};
use crate::tensor::Tensor;
use crate::treeenc::{GatConfig, GeneratedTreeEncoder, Pooling, TreeEncError};
use crate::treelib::{tree_to_adjacency_vector, AdjacencyVector, TreeMap, MAX_NODES};

pub use crate::nn::attention;

/// Offset mixed into the seed for the tree branch's random stream.
const TREE_STREAM: u64 = 0x7265_655f_6272_616e;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("no pseudo-tree for recipe {0}; run parse-trees first")]
    MissingTree(String),
    #[error("image feature has dimension {found}, expected {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("recipe has no ingredients")]
    NoIngredients,
    #[error("tree branch is enabled but no tree was supplied")]
    NoTree,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Img2Tree(#[from] Img2TreeError),
    #[error(transparent)]
    TreeEnc(#[from] TreeEncError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

/// `λ1 · l_gen + λ2 · l_tree`
pub fn joint_loss(l_gen: f64, l_tree: f64, weights: JointLossWeights) -> f64 {
    weights.lambda1 * l_gen + weights.lambda2 * l_tree
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TreeBranch {
    /// Tree generator trained and its encoded tree used as a memory slot.
    #[default]
    Enabled,
    /// Tree parameters exist, but no tree feature reaches the decoder.
    Zeroed,
    /// No tree parameters at all.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBranchConfig {
    pub hidden: usize,
    pub layers: usize,
    #[serde(default)]
    pub cell: RnnKind,
    pub gat_heads: usize,
    #[serde(default = "one")]
    pub gat_layers: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pooling: Pooling,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub seed: u64,
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnConfig {
    pub decoder: DecoderConfig,
    pub tree: TreeBranchConfig,
    pub branch: TreeBranch,
    pub weights: JointLossWeights,
    pub train: SgnTrainConfig,
}

impl SgnConfig {
    pub fn desk() -> Self {
        Self {
            decoder: DecoderConfig {
                dim: 128,
                layers: 2,
                heads: 4,
                max_len: 160,
            },
            tree: TreeBranchConfig {
                hidden: 64,
                layers: 2,
                cell: RnnKind::Gru,
                gat_heads: 6,
                gat_layers: 1,
                activation: Activation::Tanh,
                pooling: Pooling::Mean,
            },
            branch: TreeBranch::Enabled,
            weights: JointLossWeights::default(),
            train: SgnTrainConfig {
                epochs: 60,
                lr: 1e-3,
                schedule: LrSchedule::Exponential { factor: 0.99 },
                batch_size: 16,
                clip: None,
                seed: 0,
                min_freq: 1,
            },
        }
    }

    pub fn paper() -> Self {
        Self {
            decoder: DecoderConfig {
                dim: 512,
                layers: 16,
                heads: 8,
                max_len: 150,
            },
            tree: TreeBranchConfig {
                hidden: 512,
                layers: 2,
                cell: RnnKind::Gru,
                gat_heads: 6,
                gat_layers: 1,
                activation: Activation::Tanh,
                pooling: Pooling::Mean,
            },
            branch: TreeBranch::Enabled,
            weights: JointLossWeights::default(),
            train: SgnTrainConfig {
                epochs: 50,
                lr: 1e-3,
                schedule: LrSchedule::Exponential { factor: 0.99 },
                batch_size: 16,
                clip: None,
                seed: 0,
                min_freq: 1,
            },
        }
    }

    fn validate(&self) -> Result<(), GenError> {
        let d = &self.decoder;
        if d.dim == 0 || d.layers == 0 || d.heads == 0 || !d.dim.is_multiple_of(d.heads) {
            return Err(GenError::InvalidConfig(
                "decoder dim must be a positive multiple of heads".into(),
            ));
        }
        if d.max_len == 0 {
            return Err(GenError::InvalidConfig("max_len must be positive".into()));
        }
        if self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 {
            return Err(GenError::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.train.batch_size == 0 {
            return Err(GenError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SgnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Decoder-side parameters.
#[derive(Debug, Clone)]
pub struct GenParams {
    tokens: Embedding,
    positions: Embedding,
    ingredients: Embedding,
    image: Linear,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct TreeParts {
    generator: TreeGenerator,
    encoder: GeneratedTreeEncoder,
    proj: Linear,
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct GenItem {
    pub id: String,
    /// `BOS`, tokens, `EOS`.
    pub target: Vec<usize>,
    pub ingredients: Vec<usize>,
    pub image: Vec<f64>,
    pub tree: Option<AdjacencyVector>,
}

/// Full structure-aware generation model.
#[derive(Debug, Clone)]
pub struct SgnModel {
    pub config: SgnConfig,
    pub image_dim: usize,
    pub words: Vocab,
    pub ingredient_vocab: Vocab,
    pub store: ParamStore,
    gen: GenParams,
    tree: Option<TreeParts>,
}

impl SgnModel {
    pub fn new(
        config: SgnConfig,
        image_dim: usize,
        words: Vocab,
        ingredient_vocab: Vocab,
    ) -> Result<Self, GenError> {
        config.validate()?;
        if image_dim == 0 {
            return Err(GenError::InvalidConfig("image_dim must be positive".into()));
        }
        let seed = config.train.seed;
        let d = &config.decoder;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let gen = GenParams {
            tokens: Embedding::new(&mut store, "gen.tok", words.len(), d.dim, &mut r),
            positions: Embedding::new(&mut store, "gen.pos", d.max_len, d.dim, &mut r),
            ingredients: Embedding::new(&mut store, "gen.ing", ingredient_vocab.len(), d.dim, &mut r),
            image: Linear::new(&mut store, "gen.img", image_dim, d.dim, true, &mut r),
            layers: (0..d.layers)
                .map(|l| DecoderLayer::new(&mut store, &format!("gen.dec{l}"), d.dim, d.heads, &mut r))
                .collect(),
            norm: LayerNorm::new(&mut store, "gen.norm", d.dim),
            head: Linear::new(&mut store, "gen.head", d.dim, words.len(), true, &mut r),
        };
        let tree = match config.branch {
            TreeBranch::Disabled => None,
            TreeBranch::Enabled | TreeBranch::Zeroed => {
                let mut tr = rng(seed ^ TREE_STREAM);
                let t = &config.tree;
                let generator = TreeGenerator::new(
                    &mut store,
                    "tree.gen",
                    TreeGenConfig {
                        image_dim,
                        hidden: t.hidden,
                        layers: t.layers,
                        cell: t.cell,
                    },
                    &mut tr,
                )?;
                let encoder = GeneratedTreeEncoder::new(
                    &mut store,
                    "tree.enc",
                    GatConfig {
                        heads: t.gat_heads,
                        out_dim: image_dim,
                        layers: t.gat_layers,
                        activation: t.activation,
                        pooling: t.pooling,
                    },
                    &mut tr,
                );
                let proj = Linear::new(&mut store, "tree.proj", image_dim, d.dim, true, &mut tr);
                Some(TreeParts {
                    generator,
                    encoder,
                    proj,
                })
            }
        };
        Ok(Self {
            config,
            image_dim,
            words,
            ingredient_vocab,
            store,
            gen,
            tree,
        })
    }

    /// Rebuilds a model around stored values; names and shapes must match.
    pub fn from_parts(
        config: SgnConfig,
        image_dim: usize,
        words: Vocab,
        ingredient_vocab: Vocab,
        store: ParamStore,
    ) -> Result<Self, GenError> {
        let mut model = Self::new(config, image_dim, words, ingredient_vocab)?;
        model
            .store
            .check_layout(&store)
            .map_err(GenError::InvalidConfig)?;
        model.store = store;
        Ok(model)
    }

    pub fn uses_tree(&self) -> bool {
        self.config.branch == TreeBranch::Enabled
    }

    /// Encodes a recipe with this model's vocabularies.
    pub fn item(&self, recipe: &Recipe, tree: Option<AdjacencyVector>) -> GenItem {
        let enc = encode_recipe(recipe, &self.words, &self.ingredient_vocab);
        GenItem {
            id: recipe.id.clone(),
            target: enc.target,
            ingredients: enc.ingredients,
            image: recipe.image_feature_f64(),
            tree,
        }
    }

    fn check_inputs(&self, image: &[f64], ingredients: &[usize]) -> Result<(), GenError> {
        if image.len() != self.image_dim {
            return Err(GenError::FeatureDim {
                expected: self.image_dim,
                found: image.len(),
            });
        }
        if ingredients.is_empty() {
            return Err(GenError::NoIngredients);
        }
        Ok(())
    }

    /// Memory slots `[img; ingredients...; tree]` (`slots × dim`).
    pub fn memory(
        &self,
        g: &mut Graph,
        image: &[f64],
        ingredients: &[usize],
        tree: Option<&AdjacencyVector>,
    ) -> Result<Var, GenError> {
        self.check_inputs(image, ingredients)?;
        let img = g.constant(Tensor::row_vector(image.to_vec()));
        let mut slots = vec![self.gen.image.forward(g, img)];
        slots.push(self.gen.ingredients.lookup(g, ingredients));
        if self.uses_tree() {
            let parts = self.tree.as_ref().expect("tree branch built");
            let v = tree.ok_or(GenError::NoTree)?;
            let f_tree = parts.encoder.encode(g, v)?;
            slots.push(parts.proj.forward(g, f_tree));
        }
        Ok(g.concat_rows(&slots))
    }

    /// Next-token logits for every prefix position (`len × vocab`).
    pub fn logits(&self, g: &mut Graph, inputs: &[usize], memory: Var) -> Result<Var, GenError> {
        let max = self.config.decoder.max_len;
        if inputs.len() > max {
            return Err(GenError::TooLong {
                len: inputs.len(),
                max,
            });
        }
        let tok = self.gen.tokens.lookup(g, inputs);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = self.gen.positions.lookup(g, &positions);
        let mut x = g.add(tok, pos);
        let mask = causal_mask(inputs.len());
        for layer in &self.gen.layers {
            x = layer.forward(g, x, memory, &mask);
        }
        let x = self.gen.norm.forward(g, x);
        Ok(self.gen.head.forward(g, x))
    }

    /// Mean next-token cross-entropy of `target` and the logits node.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        target: &[usize],
        memory: Var,
    ) -> Result<(Var, Var), GenError> {
        if target.len() < 2 {
            return Err(GenError::InvalidConfig("target needs BOS and EOS".into()));
        }
        let logits = self.logits(g, &target[..target.len() - 1], memory)?;
        let loss = g.cross_entropy(logits, &target[1..]);
        Ok((loss, logits))
    }

    /// `(L_gen, logits)` for one item; `tree` feeds the tree slot.
    pub fn teacher_forced_loss(
        &self,
        item: &GenItem,
        tree: Option<&AdjacencyVector>,
    ) -> Result<(f64, Tensor), GenError> {
        let mut g = Graph::with_params(&self.store);
        let mem = self.memory(&mut g, &item.image, &item.ingredients, tree)?;
        let (loss, logits) = self.teacher_forced(&mut g, &item.target, mem)?;
        Ok((g.scalar(loss), g.value(logits).clone()))
    }

    /// Log-probability of every ground-truth next token.
    pub fn token_logprobs(
        &self,
        item: &GenItem,
        tree: Option<&AdjacencyVector>,
    ) -> Result<Vec<f64>, GenError> {
        let (_, logits) = self.teacher_forced_loss(item, tree)?;
        Ok(item.target[1..]
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = logits.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row[t] - lse
            })
            .collect())
    }

    /// Joint training loss for one item as a graph node, plus its parts.
    fn joint(&self, g: &mut Graph, item: &GenItem) -> Result<(Var, f64, f64), GenError> {
        let w = self.config.weights;
        let mem = self.memory(g, &item.image, &item.ingredients, item.tree.as_ref())?;
        let (l_gen, _) = self.teacher_forced(g, &item.target, mem)?;
        let gen_val = g.scalar(l_gen);
        let mut loss = g.scale(l_gen, w.lambda1);
        let mut tree_val = 0.0;
        if let (Some(parts), true) = (&self.tree, w.lambda2 > 0.0) {
            let v = item.tree.as_ref().ok_or(GenError::NoTree)?;
            let f = g.constant(Tensor::row_vector(item.image.clone()));
            let l_tree = parts.generator.nll(g, f, v)?;
            tree_val = g.scalar(l_tree);
            let weighted = g.scale(l_tree, w.lambda2);
            loss = g.add(loss, weighted);
        }
        Ok((loss, gen_val, tree_val))
    }

    /// Tree decoded from an image feature (argmax), when the branch is used.
    pub fn generate_tree(&self, image: &[f64]) -> Result<Option<AdjacencyVector>, GenError> {
        if !self.uses_tree() {
            return Ok(None);
        }
        let parts = self.tree.as_ref().expect("tree branch built");
        let v = parts.generator.generate_tree(
            &self.store,
            image,
            DecodeMode::Argmax,
            MAX_NODES,
            &mut rng(0),
        )?;
        Ok(Some(v))
    }

    /// Greedy decoding; stops after EOS (which is kept) or `max_len` tokens.
    pub fn decode_greedy(
        &self,
        image: &[f64],
        ingredients: &[usize],
        tree: Option<&AdjacencyVector>,
        max_len: usize,
    ) -> Result<Vec<usize>, GenError> {
        let max_len = max_len.min(self.config.decoder.max_len);
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::with_params(&self.store);
            let mem = self.memory(&mut g, image, ingredients, tree)?;
            let logits = self.logits(&mut g, &seq, mem)?;
            let row = g.value(logits).row(seq.len() - 1);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            out.push(best);
            if best == EOS {
                break;
            }
            seq.push(best);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l_gen: f64,
    pub l_tree: f64,
    pub lr: f64,
}

fn image_dim_of(corpus: &Corpus) -> Result<usize, GenError> {
    corpus.image_dim().ok_or(GenError::EmptyCorpus)
}

/// Builds training items, attaching pseudo-trees when the branch needs them.
pub fn build_items(
    model: &SgnModel,
    corpus: &Corpus,
    trees: Option<&TreeMap>,
) -> Result<Vec<GenItem>, GenError> {
    let need = model.config.branch != TreeBranch::Disabled;
    corpus
        .recipes
        .iter()
        .map(|r| {
            let tree = if need {
                let t = trees
                    .and_then(|m| m.get(&r.id))
                    .ok_or_else(|| GenError::MissingTree(r.id.clone()))?;
                Some(tree_to_adjacency_vector(t))
            } else {
                None
            };
            let item = model.item(r, tree);
            if item.target.len() - 1 > model.config.decoder.max_len {
                return Err(GenError::TooLong {
                    len: item.target.len() - 1,
                    max: model.config.decoder.max_len,
                });
            }
            Ok(item)
        })
        .collect()
}

/// Trains decoder and tree branch jointly with Adam.
pub fn train_sgn(
    corpus: &Corpus,
    trees: Option<&TreeMap>,
    config: &SgnConfig,
) -> Result<(SgnModel, Vec<SgnEpochLog>), GenError> {
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let words = build_vocab(corpus, config.train.min_freq)?;
    let ingredients = build_ingredient_vocab(corpus, 1)?;
    let mut model = SgnModel::new(config.clone(), image_dim_of(corpus)?, words, ingredients)?;
    let items = build_items(&model, corpus, trees)?;
    let tc = &config.train;
    let mut opt = Adam::new(tc.lr, tc.clip);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng: ModelRng = rng(tc.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        opt.lr = tc.schedule.lr_at(tc.lr, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut gen_total, mut tree_total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(tc.batch_size) {
            let mut acc = ParamGrads::new(model.store.len());
            for &i in chunk {
                let mut g = Graph::with_params(&model.store);
                let (loss, lg, lt) = model.joint(&mut g, &items[i])?;
                total += g.scalar(loss);
                gen_total += lg;
                tree_total += lt;
                let grads = g.backward(loss);
                acc.accumulate(&g.param_grads(&grads));
            }
            acc.scale(1.0 / chunk.len() as f64);
            opt.step(&mut model.store, &acc);
        }
        let n = items.len() as f64;
        let entry = SgnEpochLog {
            epoch: epoch + 1,
            loss: total / n,
            l_gen: gen_total / n,
            l_tree: tree_total / n,
            lr: opt.lr,
        };
        log::info!(
            "sgn epoch {} loss {:.4} gen {:.4} tree {:.4}",
            entry.epoch,
            entry.loss,
            entry.l_gen,
            entry.l_tree
        );
        log.push(entry);
    }
    Ok((model, log))
}

/// Decoded output for one recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecipe {
    pub id: String,
    pub tokens: Vec<String>,
    pub reference: Vec<String>,
    /// Node count of the tree used for conditioning.
    pub tree_nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub metrics: GenEvalResult,
    /// Mean `|generated length − reference length|` in tokens.
    pub length_error: f64,
    pub outputs: Vec<GeneratedRecipe>,
}

/// Decodes every recipe (with generated trees) and scores the outputs.
pub fn evaluate_generation(model: &SgnModel, corpus: &Corpus) -> Result<GenerationEval, GenError> {
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let mut logprobs = Vec::new();
    let mut outputs = Vec::with_capacity(corpus.len());
    for recipe in &corpus.recipes {
        let image = recipe.image_feature_f64();
        let tree = model.generate_tree(&image)?;
        let item = model.item(recipe, None);
        logprobs.extend(model.token_logprobs(&item, tree.as_ref())?);
        let ids = model.decode_greedy(
            &image,
            &item.ingredients,
            tree.as_ref(),
            model.config.decoder.max_len,
        )?;
        let tokens: Vec<String> = ids
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| model.words.token(t).to_string())
            .collect();
        outputs.push(GeneratedRecipe {
            id: recipe.id.clone(),
            tokens,
            reference: recipe.instructions.iter().flatten().cloned().collect(),
            tree_nodes: tree.as_ref().map(AdjacencyVector::num_nodes),
        });
    }
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| o.tokens.clone()).collect();
    let refs: Vec<Vec<String>> = outputs.iter().map(|o| o.reference.clone()).collect();
    let length_error = outputs
        .iter()
        .map(|o| (o.tokens.len() as f64 - o.reference.len() as f64).abs())
        .sum::<f64>()
        / outputs.len() as f64;
    Ok(GenerationEval {
        metrics: GenEvalResult {
            perplexity: perplexity(&logprobs)?,
            bleu: bleu(&cands, &refs)?,
            rouge_l: corpus_rouge_l(&cands, &refs, 1.0)?,
            avg_length: avg_length(&cands)?,
        },
        length_error,
        outputs,
    })
}
