//! Tree-augmented cross-modal retrieval: recipe and image encoders into a
//! shared space, BatchHard triplet training and ranking.
//!
//! The recipe side concatenates `[F_tree; F_ins; F_ing]` and projects it to
//! the common space. `F_ing` is a BiLSTM over ingredient embeddings pooled by
//! additive self-attention, `F_ins` a BiLSTM over trainable sentence vectors
//! (mean word embedding through a tanh layer), and `F_tree` a graph-attention
//! encoding of the parsed tree over those same sentence vectors plus depth
//! embeddings. Both sides are L2-normalized.
//!
//! With the tree branch off, `F_tree` is a zero block of the same width, so
//! both arms share every other parameter and the whole random stream.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_ingredient_vocab, build_vocab, encode_recipe, Corpus, CorpusError, Recipe, Vocab,
};
use crate::graph::{Graph, Var};
use crate::metrics::{ranks, ret_metrics, Direction, MetricsError, RankingReport, RetEvalResult};
use crate::nn::init::{rng, ModelRng};
use crate::nn::{Adam, BiLstm, Embedding, Linear, LrSchedule, ParamGrads, ParamStore};
use crate::tensor::Tensor;
use crate::treeenc::{GatConfig, ParsedTreeEncoder, TreeEncError};
use crate::treelib::{SentenceTree, TreeMap};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("batch of {0} pairs is too small; need at least 2")]
    BatchTooSmall(usize),
    #[error("{images} image embeddings but {recipes} recipe embeddings")]
    CountMismatch { images: usize, recipes: usize },
    #[error("no pseudo-tree for recipe {0}; run parse-trees first")]
    MissingTree(String),
    #[error("image feature has dimension {found}, expected {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("recipe {0} has no ingredients or no instructions")]
    EmptyRecipe(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    TreeEnc(#[from] TreeEncError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub seed: u64,
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub word_dim: usize,
    pub sentence_dim: usize,
    pub ingredient_dim: usize,
    /// Hidden size per direction of both BiLSTMs.
    pub hidden: usize,
    pub depth_dim: usize,
    pub gat: GatConfig,
    pub common_dim: usize,
    pub margin: f64,
    /// `false` replaces `F_tree` by zeros.
    pub use_tree: bool,
    pub train: RetrievalTrainConfig,
}

impl RetrievalConfig {
    pub fn desk() -> Self {
        Self {
            word_dim: 48,
            sentence_dim: 48,
            ingredient_dim: 32,
            hidden: 32,
            depth_dim: 8,
            gat: GatConfig::new(8, 48),
            common_dim: 128,
            margin: 0.3,
            use_tree: true,
            train: RetrievalTrainConfig {
                epochs: 40,
                lr: 1e-3,
                schedule: LrSchedule::Step {
                    at_epoch: 30,
                    factor: 0.1,
                },
                batch_size: 64,
                clip: None,
                seed: 0,
                min_freq: 1,
            },
        }
    }

    pub fn paper() -> Self {
        Self {
            word_dim: 300,
            sentence_dim: 1024,
            ingredient_dim: 300,
            hidden: 300,
            depth_dim: 32,
            gat: GatConfig::new(8, 1024),
            common_dim: 1024,
            margin: 0.3,
            use_tree: true,
            train: RetrievalTrainConfig {
                epochs: 50,
                lr: 1e-4,
                schedule: LrSchedule::Step {
                    at_epoch: 30,
                    factor: 0.1,
                },
                batch_size: 64,
                clip: None,
                seed: 0,
                min_freq: 1,
            },
        }
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        let dims = [
            self.word_dim,
            self.sentence_dim,
            self.ingredient_dim,
            self.hidden,
            self.depth_dim,
            self.gat.heads,
            self.gat.out_dim,
            self.common_dim,
        ];
        if dims.contains(&0) {
            return Err(RetrievalError::InvalidConfig("all dimensions must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(RetrievalError::InvalidConfig("margin must be non-negative".into()));
        }
        if self.train.batch_size < 2 {
            return Err(RetrievalError::BatchTooSmall(self.train.batch_size));
        }
        Ok(())
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One recipe–image pair in index form.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalItem {
    pub id: String,
    pub sentences: Vec<Vec<usize>>,
    pub ingredients: Vec<usize>,
    pub tree: SentenceTree,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub config: RetrievalConfig,
    pub image_dim: usize,
    pub words: Vocab,
    pub ingredient_vocab: Vocab,
    pub store: ParamStore,
    word_emb: Embedding,
    sentence: Linear,
    ing_emb: Embedding,
    ing_rnn: BiLstm,
    ing_att: Linear,
    ing_score: Linear,
    ins_rnn: BiLstm,
    tree: ParsedTreeEncoder,
    fusion: Linear,
    image: Linear,
}

impl RetrievalModel {
    pub fn new(
        config: RetrievalConfig,
        image_dim: usize,
        words: Vocab,
        ingredient_vocab: Vocab,
    ) -> Result<Self, RetrievalError> {
        config.validate()?;
        if image_dim == 0 {
            return Err(RetrievalError::InvalidConfig("image_dim must be positive".into()));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let r: &mut ModelRng = &mut rng(c.train.seed);
        let word_emb = Embedding::new(&mut store, "ret.word", words.len(), c.word_dim, r);
        let sentence = Linear::new(&mut store, "ret.sent", c.word_dim, c.sentence_dim, true, r);
        let ing_emb =
            Embedding::new(&mut store, "ret.ing", ingredient_vocab.len(), c.ingredient_dim, r);
        let ing_rnn = BiLstm::new(&mut store, "ret.ing_rnn", c.ingredient_dim, c.hidden, r);
        let ing_att = Linear::new(&mut store, "ret.ing_att", 2 * c.hidden, c.hidden, true, r);
        let ing_score = Linear::new(&mut store, "ret.ing_score", c.hidden, 1, false, r);
        let ins_rnn = BiLstm::new(&mut store, "ret.ins_rnn", c.sentence_dim, c.hidden, r);
        let tree = ParsedTreeEncoder::new(
            &mut store,
            "ret.tree",
            c.sentence_dim,
            c.depth_dim,
            c.gat.clone(),
            r,
        );
        let fused = c.gat.out_dim + 4 * c.hidden;
        let fusion = Linear::new(&mut store, "ret.fusion", fused, c.common_dim, true, r);
        let image = Linear::new(&mut store, "ret.image", image_dim, c.common_dim, true, r);
        Ok(Self {
            config,
            image_dim,
            words,
            ingredient_vocab,
            store,
            word_emb,
            sentence,
            ing_emb,
            ing_rnn,
            ing_att,
            ing_score,
            ins_rnn,
            tree,
            fusion,
            image,
        })
    }

    /// Rebuilds a model around stored values; names and shapes must match.
    pub fn from_parts(
        config: RetrievalConfig,
        image_dim: usize,
        words: Vocab,
        ingredient_vocab: Vocab,
        store: ParamStore,
    ) -> Result<Self, RetrievalError> {
        let mut model = Self::new(config, image_dim, words, ingredient_vocab)?;
        model
            .store
            .check_layout(&store)
            .map_err(RetrievalError::InvalidConfig)?;
        model.store = store;
        Ok(model)
    }

    pub fn item(&self, recipe: &Recipe, tree: SentenceTree) -> RetrievalItem {
        let enc = encode_recipe(recipe, &self.words, &self.ingredient_vocab);
        RetrievalItem {
            id: recipe.id.clone(),
            sentences: enc.sentences,
            ingredients: enc.ingredients,
            tree,
            image: recipe.image_feature_f64(),
        }
    }

    /// Trainable sentence vectors (`sentences × sentence_dim`).
    pub fn sentence_vectors(&self, g: &mut Graph, sentences: &[Vec<usize>]) -> Var {
        let rows: Vec<Var> = sentences
            .iter()
            .map(|s| {
                let e = self.word_emb.lookup(g, s);
                g.mean_rows(e)
            })
            .collect();
        let m = g.concat_rows(&rows);
        let s = self.sentence.forward(g, m);
        g.tanh(s)
    }

    /// `F_ing` (`1 × 2·hidden`).
    pub fn ingredient_feature(&self, g: &mut Graph, ingredients: &[usize]) -> Var {
        let e = self.ing_emb.lookup(g, ingredients);
        let h = self.ing_rnn.forward(g, e);
        let a = self.ing_att.forward(g, h);
        let a = g.tanh(a);
        let s = self.ing_score.forward(g, a);
        let s = g.transpose(s);
        let w = g.softmax_rows(s);
        g.matmul(w, h)
    }

    /// Recipe embedding from externally supplied sentence vectors; this is
    /// the hook for precomputed sentence encoders.
    pub fn encode_with_sentences(
        &self,
        g: &mut Graph,
        ingredients: &[usize],
        sentence_vecs: Var,
        tree: &SentenceTree,
    ) -> Result<Var, RetrievalError> {
        let f_ing = self.ingredient_feature(g, ingredients);
        let h = self.ins_rnn.forward(g, sentence_vecs);
        let f_ins = g.mean_rows(h);
        let f_tree = if self.config.use_tree {
            self.tree.encode(g, tree, sentence_vecs)?
        } else {
            if tree.num_leaves() != g.value(sentence_vecs).rows() {
                return Err(TreeEncError::LeafCount {
                    leaves: tree.num_leaves(),
                    embeddings: g.value(sentence_vecs).rows(),
                }
                .into());
            }
            g.constant(Tensor::zeros(1, self.config.gat.out_dim))
        };
        let cat = g.concat_cols(&[f_tree, f_ins, f_ing]);
        let f = self.fusion.forward(g, cat);
        Ok(g.l2_normalize_rows(f, 1e-12))
    }

    /// `F_rec` (`1 × common_dim`).
    pub fn encode_recipe_side(&self, g: &mut Graph, item: &RetrievalItem) -> Result<Var, RetrievalError> {
        if item.sentences.is_empty() || item.ingredients.is_empty() {
            return Err(RetrievalError::EmptyRecipe(item.id.clone()));
        }
        let s = self.sentence_vectors(g, &item.sentences);
        self.encode_with_sentences(g, &item.ingredients, s, &item.tree)
    }

    /// `F_img` for a stack of image features (`n × common_dim`).
    pub fn encode_images(&self, g: &mut Graph, images: &[&[f64]]) -> Result<Var, RetrievalError> {
        if let Some(bad) = images.iter().find(|f| f.len() != self.image_dim) {
            return Err(RetrievalError::FeatureDim {
                expected: self.image_dim,
                found: bad.len(),
            });
        }
        let rows: Vec<Vec<f64>> = images.iter().map(|f| f.to_vec()).collect();
        let x = g.constant(Tensor::from_rows(&rows));
        let f = self.image.forward(g, x);
        Ok(g.l2_normalize_rows(f, 1e-12))
    }

    /// Paired embeddings for every item.
    pub fn embed(&self, items: &[RetrievalItem]) -> Result<RankingReport, RetrievalError> {
        let mut report = RankingReport {
            images: Vec::with_capacity(items.len()),
            recipes: Vec::with_capacity(items.len()),
        };
        for item in items {
            let mut g = Graph::with_params(&self.store);
            let rec = self.encode_recipe_side(&mut g, item)?;
            let img = self.encode_images(&mut g, &[&item.image])?;
            report.recipes.push(g.value(rec).data().to_vec());
            report.images.push(g.value(img).data().to_vec());
        }
        Ok(report)
    }
}

fn check_pairs(images: usize, recipes: usize) -> Result<(), RetrievalError> {
    if images != recipes {
        return Err(RetrievalError::CountMismatch { images, recipes });
    }
    if images < 2 {
        return Err(RetrievalError::BatchTooSmall(images));
    }
    Ok(())
}

/// Hardest in-batch negative for every anchor row of `d`, excluding the
/// diagonal; `transpose` reads anchors from columns.
fn hardest_negatives(d: &Tensor, transpose: bool) -> Vec<usize> {
    let n = d.rows();
    (0..n)
        .map(|a| {
            let dist = |j: usize| if transpose { d.get(j, a) } else { d.get(a, j) };
            (0..n)
                .filter(|&j| j != a)
                .min_by(|&x, &y| dist(x).total_cmp(&dist(y)))
                .expect("at least two items")
        })
        .collect()
}

/// Sum over anchors and both directions of
/// `max(0, d(a, p) − d(a, n*) + m)`, with `n*` the closest in-batch negative.
pub fn triplet_batchhard_loss(
    g: &mut Graph,
    images: Var,
    recipes: Var,
    margin: f64,
) -> Result<Var, RetrievalError> {
    check_pairs(g.value(images).rows(), g.value(recipes).rows())?;
    let d = g.pairwise_dist(images, recipes);
    let n = g.value(d).rows();
    let mut pos = Vec::with_capacity(2 * n);
    let mut neg = Vec::with_capacity(2 * n);
    for (a, j) in hardest_negatives(g.value(d), false).into_iter().enumerate() {
        pos.push((a, a));
        neg.push((a, j));
    }
    for (a, j) in hardest_negatives(g.value(d), true).into_iter().enumerate() {
        pos.push((a, a));
        neg.push((j, a));
    }
    let p = g.pick(d, &pos);
    let q = g.pick(d, &neg);
    let diff = g.sub(p, q);
    let hinge = g.add_scalar(diff, margin);
    let hinge = g.relu(hinge);
    Ok(g.sum_all(hinge))
}

/// Value-only version of [`triplet_batchhard_loss`].
pub fn triplet_batchhard_value(
    images: &[Vec<f64>],
    recipes: &[Vec<f64>],
    margin: f64,
) -> Result<f64, RetrievalError> {
    check_pairs(images.len(), recipes.len())?;
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(images));
    let b = g.constant(Tensor::from_rows(recipes));
    let l = triplet_batchhard_loss(&mut g, a, b, margin)?;
    Ok(g.scalar(l))
}

/// Per-query ranks of the true match in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSet {
    pub image_to_recipe: Vec<usize>,
    pub recipe_to_image: Vec<usize>,
}

pub fn rank(report: &RankingReport) -> Result<RankSet, RetrievalError> {
    if report.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if report.images.len() != report.recipes.len() {
        return Err(RetrievalError::CountMismatch {
            images: report.images.len(),
            recipes: report.recipes.len(),
        });
    }
    Ok(RankSet {
        image_to_recipe: ranks(&report.images, &report.recipes),
        recipe_to_image: ranks(&report.recipes, &report.images),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Image-to-recipe R@1 over the whole held-out split.
    pub val_r1: Option<f64>,
}

/// Items for every recipe, each paired with its parsed tree.
pub fn build_items(
    model: &RetrievalModel,
    corpus: &Corpus,
    trees: &TreeMap,
) -> Result<Vec<RetrievalItem>, RetrievalError> {
    corpus
        .recipes
        .iter()
        .map(|r| {
            let t = trees
                .get(&r.id)
                .ok_or_else(|| RetrievalError::MissingTree(r.id.clone()))?;
            if t.num_leaves() != r.num_sentences() {
                return Err(TreeEncError::LeafCount {
                    leaves: t.num_leaves(),
                    embeddings: r.num_sentences(),
                }
                .into());
            }
            Ok(model.item(r, t.clone()))
        })
        .collect()
}

fn r_at_1(model: &RetrievalModel, items: &[RetrievalItem]) -> Result<f64, RetrievalError> {
    let r = rank(&model.embed(items)?)?;
    Ok(r.image_to_recipe.iter().filter(|&&x| x == 1).count() as f64 / items.len() as f64)
}

/// Trains both encoders with the BatchHard triplet loss and Adam.
pub fn train_retrieval(
    corpus: &Corpus,
    trees: &TreeMap,
    config: &RetrievalConfig,
    held_out: Option<(&Corpus, &TreeMap)>,
) -> Result<(RetrievalModel, Vec<RetEpochLog>), RetrievalError> {
    if corpus.len() < 2 {
        return Err(RetrievalError::BatchTooSmall(corpus.len()));
    }
    let words = build_vocab(corpus, config.train.min_freq)?;
    let ingredients = build_ingredient_vocab(corpus, 1)?;
    let image_dim = corpus.image_dim().ok_or(RetrievalError::EmptyCorpus)?;
    let mut model = RetrievalModel::new(config.clone(), image_dim, words, ingredients)?;
    let items = build_items(&model, corpus, trees)?;
    let val = match held_out {
        Some((c, t)) if !c.is_empty() => Some(build_items(&model, c, t)?),
        _ => None,
    };
    let tc = &config.train;
    let mut opt = Adam::new(tc.lr, tc.clip);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng(tc.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        opt.lr = tc.schedule.lr_at(tc.lr, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::with_params(&model.store);
            let recs = chunk
                .iter()
                .map(|&i| model.encode_recipe_side(&mut g, &items[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let recs = g.concat_rows(&recs);
            let feats: Vec<&[f64]> = chunk.iter().map(|&i| items[i].image.as_slice()).collect();
            let imgs = model.encode_images(&mut g, &feats)?;
            let loss = triplet_batchhard_loss(&mut g, imgs, recs, config.margin)?;
            total += g.scalar(loss) / chunk.len() as f64;
            batches += 1;
            let grads = g.backward(loss);
            let mut pg: ParamGrads = g.param_grads(&grads);
            pg.scale(1.0 / chunk.len() as f64);
            drop(g);
            opt.step(&mut model.store, &pg);
        }
        let val_r1 = match &val {
            Some(v) => Some(r_at_1(&model, v)?),
            None => None,
        };
        let entry = RetEpochLog {
            epoch: epoch + 1,
            loss: total / batches.max(1) as f64,
            lr: opt.lr,
            val_r1,
        };
        log::info!(
            "retrieval epoch {} loss {:.4} val R@1 {:?}",
            entry.epoch,
            entry.loss,
            entry.val_r1
        );
        log.push(entry);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub image_to_recipe: RetEvalResult,
    pub recipe_to_image: RetEvalResult,
}

/// MedR and R@K in both directions over random subsets.
pub fn evaluate_retrieval(
    model: &RetrievalModel,
    corpus: &Corpus,
    trees: &TreeMap,
    ks: &[usize],
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<(RetrievalEval, RankingReport), RetrievalError> {
    let items = build_items(model, corpus, trees)?;
    let report = model.embed(&items)?;
    let eval = RetrievalEval {
        image_to_recipe: ret_metrics(&report, ks, subset_size, n_subsets, seed, Direction::ImageToRecipe)?,
        recipe_to_image: ret_metrics(&report, ks, subset_size, n_subsets, seed, Direction::RecipeToImage)?,
    };
    Ok((eval, report))
}
