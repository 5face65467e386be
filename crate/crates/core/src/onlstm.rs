//! Ordered-neurons recurrent cell, hierarchical recipe encoding,
//! quick-thoughts training and pseudo-tree derivation.
//!
//! The cell follows the ordered-neurons construction: two softmaxes over
//! `levels` split points (the master forget and input distributions `d_f`,
//! `d_i`) are turned into monotone master gates by a cumulative sum,
//! repeated over `chunk` neurons per level, and blended with ordinary LSTM
//! gates. The hidden size is `levels · chunk`.
//!
//! A recipe is encoded bottom-up: a word-level stack reads each sentence and
//! its final output is the sentence embedding `g(s)`; a sentence-level stack
//! reads `g(s_1) .. g(s_m)` and its final output is the context embedding.
//! The expected split point of the sentence-level `d_f` at every position
//! becomes the split score that the greedy parser turns into a tree.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_vocab, Corpus, CorpusError, Vocab};
use crate::graph::{Graph, Var};
use crate::nn::init::{rng, xavier, ModelRng};
use crate::nn::{Embedding, LrSchedule, ParamGrads, ParamStore, Sgd};
use crate::tensor::{dot, softmax, Tensor};
use crate::treelib::{parse_from_scores, SentenceTree, SplitScores, TreeError, TreeMap};

#[derive(Debug, Error)]
pub enum OnlstmError {
    #[error("split distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("empty split distribution")]
    EmptyDistribution,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("recipe has no sentences")]
    NoSentences,
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("no recipe has at least {0} sentences")]
    NoEligibleRecipes(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Expected split point `Σ k · p(k)` for `k = 1..=levels`.
pub fn expected_split(p_f: &[f64]) -> Result<f64, OnlstmError> {
    if p_f.is_empty() {
        return Err(OnlstmError::EmptyDistribution);
    }
    let sum: f64 = p_f.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-5 {
        return Err(OnlstmError::NotNormalized(sum));
    }
    Ok(p_f
        .iter()
        .enumerate()
        .map(|(k, p)| (k + 1) as f64 * p)
        .sum())
}

/// Softmax over inner products `⟨f_ctxt, g(cand)⟩`.
pub fn qt_probability(f_ctxt: &[f64], cand_embs: &[Vec<f64>]) -> Result<Vec<f64>, OnlstmError> {
    for c in cand_embs {
        if c.len() != f_ctxt.len() {
            return Err(OnlstmError::DimMismatch {
                expected: f_ctxt.len(),
                found: c.len(),
            });
        }
    }
    let logits: Vec<f64> = cand_embs.iter().map(|c| dot(f_ctxt, c)).collect();
    Ok(softmax(&logits))
}

/// One ordered-neurons layer. Fused pre-activation column layout:
/// `[master forget | master input | forget | input | candidate | output]`.
#[derive(Debug, Clone)]
pub struct OrderedCell {
    w: crate::nn::ParamId,
    u: crate::nn::ParamId,
    b: crate::nn::ParamId,
    pub input: usize,
    pub levels: usize,
    pub chunk: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CellStep {
    pub h: Var,
    pub c: Var,
    /// Master forget split distribution (`1 × levels`).
    pub d_f: Var,
    /// Master input split distribution (`1 × levels`).
    pub d_i: Var,
}

impl OrderedCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        levels: usize,
        chunk: usize,
        gain: f64,
        rng: &mut ModelRng,
    ) -> Self {
        let hidden = levels * chunk;
        let width = 2 * levels + 4 * hidden;
        let mut w = xavier(input, width, rng);
        w.scale_in_place(gain);
        let mut u = xavier(hidden, width, rng);
        u.scale_in_place(gain);
        let w = store.add(format!("{name}.w"), w);
        let u = store.add(format!("{name}.u"), u);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, width));
        Self {
            w,
            u,
            b,
            input,
            levels,
            chunk,
        }
    }

    pub fn hidden(&self) -> usize {
        self.levels * self.chunk
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> CellStep {
        let (l, hd) = (self.levels, self.hidden());
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let pre = g.add(xw, hu);
        let pre = g.add_row(pre, b);

        let mf = g.slice_cols(pre, 0, l);
        let d_f = g.softmax_rows(mf);
        let mi = g.slice_cols(pre, l, l);
        let d_i = g.softmax_rows(mi);
        let mf_gate = g.cumsum_rows(d_f);
        let mf_gate = g.repeat_cols(mf_gate, self.chunk);
        let mi_gate = g.cumsum_rows(d_i);
        let mi_gate = g.one_minus(mi_gate);
        let mi_gate = g.repeat_cols(mi_gate, self.chunk);

        let base = 2 * l;
        let f = g.slice_cols(pre, base, hd);
        let f = g.sigmoid(f);
        let i = g.slice_cols(pre, base + hd, hd);
        let i = g.sigmoid(i);
        let cand = g.slice_cols(pre, base + 2 * hd, hd);
        let cand = g.tanh(cand);
        let o = g.slice_cols(pre, base + 3 * hd, hd);
        let o = g.sigmoid(o);

        let omega = g.mul(mf_gate, mi_gate);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let inner = g.add(fc, ic);
        let overlap = g.mul(omega, inner);
        let keep_w = g.sub(mf_gate, omega);
        let keep = g.mul(keep_w, c);
        let write_w = g.sub(mi_gate, omega);
        let write = g.mul(write_w, cand);
        let c_new = g.add(overlap, keep);
        let c_new = g.add(c_new, write);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        CellStep {
            h: h_new,
            c: c_new,
            d_f,
            d_i,
        }
    }
}

/// Stack of ordered cells run over the rows of an input.
#[derive(Debug, Clone)]
pub struct OrderedStack {
    pub cells: Vec<OrderedCell>,
}

/// Outputs of [`OrderedStack::run`].
pub struct StackRun {
    /// Top-layer outputs, one row per step.
    pub outputs: Var,
    /// `d_f[layer][t]`.
    pub d_f: Vec<Vec<Var>>,
}

impl OrderedStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        cfg: &Recipe2TreeConfig,
        rng: &mut ModelRng,
    ) -> Self {
        let mut cells = Vec::with_capacity(cfg.layers);
        let mut dim = input;
        for k in 0..cfg.layers {
            let cell = OrderedCell::new(
                store,
                &format!("{name}.{k}"),
                dim,
                cfg.levels,
                cfg.chunk,
                cfg.init_gain,
                rng,
            );
            dim = cell.hidden();
            cells.push(cell);
        }
        Self { cells }
    }

    pub fn run(&self, g: &mut Graph, xs: Var) -> StackRun {
        let n = g.value(xs).rows();
        let mut input = xs;
        let mut d_f = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let hd = cell.hidden();
            let mut h = g.constant(Tensor::zeros(1, hd));
            let mut c = g.constant(Tensor::zeros(1, hd));
            let mut outs = Vec::with_capacity(n);
            let mut dists = Vec::with_capacity(n);
            for t in 0..n {
                let x = g.row(input, t);
                let s = cell.step(g, x, h, c);
                h = s.h;
                c = s.c;
                outs.push(h);
                dists.push(s.d_f);
            }
            input = g.concat_rows(&outs);
            d_f.push(dists);
        }
        StackRun {
            outputs: input,
            d_f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe2TreeConfig {
    pub embed_dim: usize,
    /// Number of split points `D_m`.
    pub levels: usize,
    /// Neurons per level; hidden size is `levels · chunk`.
    pub chunk: usize,
    /// Layers in each of the word-level and sentence-level stacks.
    pub layers: usize,
    /// Sentence-level layer whose `d_f` yields split scores; `None` = top.
    #[serde(default)]
    pub split_layer: Option<usize>,
    /// Multiplier on the Xavier bound of the cell weights. Small models need
    /// a larger one: with unit gain the inner-product logits start near zero
    /// and training sits on a plateau.
    #[serde(default = "unit_gain")]
    pub init_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl Recipe2TreeConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            levels: 16,
            chunk: 2,
            layers: 2,
            split_layer: None,
            init_gain: 4.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            embed_dim: 400,
            levels: 115,
            chunk: 10,
            layers: 3,
            split_layer: None,
            init_gain: 1.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.levels * self.chunk
    }

    pub fn validate(&self) -> Result<(), OnlstmError> {
        if self.embed_dim == 0 || self.levels == 0 || self.chunk == 0 || self.layers == 0 {
            return Err(OnlstmError::InvalidConfig(
                "embed_dim, levels, chunk and layers must be positive".into(),
            ));
        }
        if let Some(l) = self.split_layer {
            if l >= self.layers {
                return Err(OnlstmError::InvalidConfig(format!(
                    "split_layer {l} out of range for {} layers",
                    self.layers
                )));
            }
        }
        Ok(())
    }
}

impl Default for Recipe2TreeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Embedding table plus word-level and sentence-level ordered stacks.
#[derive(Debug, Clone)]
pub struct Recipe2TreeParams {
    pub config: Recipe2TreeConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    embedding: Embedding,
    word: OrderedStack,
    sentence: OrderedStack,
}

/// Result of [`Recipe2TreeParams::encode_hierarchical`].
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalEncoding {
    pub sentence_embeddings: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    pub scores: SplitScores,
}

impl Recipe2TreeParams {
    pub fn new(config: Recipe2TreeConfig, vocab: Vocab, seed: u64) -> Result<Self, OnlstmError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let embedding =
            Embedding::with_bound(&mut store, "r2t.embed", vocab.len(), config.embed_dim, 1.0, &mut r);
        let word = OrderedStack::new(&mut store, "r2t.word", config.embed_dim, &config, &mut r);
        let sentence = OrderedStack::new(&mut store, "r2t.sent", config.hidden(), &config, &mut r);
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            word,
            sentence,
        })
    }

    /// Rebuilds the model around stored values; names and shapes must match.
    pub fn from_parts(
        config: Recipe2TreeConfig,
        vocab: Vocab,
        store: ParamStore,
    ) -> Result<Self, OnlstmError> {
        let mut params = Self::new(config, vocab, 0)?;
        params.store.check_layout(&store).map_err(OnlstmError::InvalidConfig)?;
        params.store = store;
        Ok(params)
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden()
    }

    /// Sentence embedding `g(s)` (`1 × hidden`).
    pub fn sentence_embedding(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let x = self.embedding.lookup(g, tokens);
        let run = self.word.run(g, x);
        g.row(run.outputs, tokens.len() - 1)
    }

    /// Runs the sentence-level stack over stacked sentence embeddings.
    pub fn sentence_level(&self, g: &mut Graph, embs: Var) -> StackRun {
        self.sentence.run(g, embs)
    }

    fn split_layer(&self) -> usize {
        self.config.split_layer.unwrap_or(self.config.layers - 1)
    }

    /// Context embedding of a list of sentences (`1 × hidden`).
    pub fn context_embedding(&self, g: &mut Graph, sentences: &[Vec<usize>]) -> Var {
        let embs: Vec<Var> = sentences
            .iter()
            .map(|s| self.sentence_embedding(g, s))
            .collect();
        let stacked = g.concat_rows(&embs);
        let run = self.sentence_level(g, stacked);
        g.row(run.outputs, sentences.len() - 1)
    }

    pub fn encode_hierarchical(
        &self,
        sentences: &[Vec<usize>],
    ) -> Result<HierarchicalEncoding, OnlstmError> {
        check_sentences(sentences)?;
        let mut g = Graph::with_params(&self.store);
        let embs: Vec<Var> = sentences
            .iter()
            .map(|s| self.sentence_embedding(&mut g, s))
            .collect();
        let stacked = g.concat_rows(&embs);
        let run = self.sentence_level(&mut g, stacked);
        let m = sentences.len();
        let context = g.value(run.outputs).row(m - 1).to_vec();
        let mut values = Vec::with_capacity(m);
        for &d in &run.d_f[self.split_layer()] {
            values.push(expected_split(g.value(d).data())?);
        }
        Ok(HierarchicalEncoding {
            sentence_embeddings: embs.iter().map(|&e| g.value(e).data().to_vec()).collect(),
            context,
            scores: SplitScores { values },
        })
    }

    pub fn encode_recipe_sentences(&self, instructions: &[Vec<String>]) -> Vec<Vec<usize>> {
        instructions
            .iter()
            .map(|s| s.iter().map(|t| self.vocab.index(t)).collect())
            .collect()
    }

    /// Negative log-likelihood of the correct candidate, as a graph node.
    pub fn qt_loss(&self, g: &mut Graph, batch: &QtBatch) -> (Var, bool) {
        let ctx = self.context_embedding(g, &batch.context);
        let cands: Vec<Var> = batch
            .candidates
            .iter()
            .map(|s| self.sentence_embedding(g, s))
            .collect();
        let cands = g.concat_rows(&cands);
        let logits = g.matmul_t(ctx, cands);
        let predicted = argmax(g.value(logits).data());
        let loss = g.cross_entropy(logits, &[batch.correct]);
        (loss, predicted == batch.correct)
    }

    /// Probability vector over a batch's candidates.
    pub fn qt_probabilities(&self, batch: &QtBatch) -> Result<Vec<f64>, OnlstmError> {
        check_sentences(&batch.context)?;
        check_sentences(&batch.candidates)?;
        let mut g = Graph::with_params(&self.store);
        let ctx = self.context_embedding(&mut g, &batch.context);
        let ctx = g.value(ctx).data().to_vec();
        let cands: Vec<Vec<f64>> = batch
            .candidates
            .iter()
            .map(|s| {
                let e = self.sentence_embedding(&mut g, s);
                g.value(e).data().to_vec()
            })
            .collect();
        qt_probability(&ctx, &cands)
    }
}

fn check_sentences(sentences: &[Vec<usize>]) -> Result<(), OnlstmError> {
    if sentences.is_empty() {
        return Err(OnlstmError::NoSentences);
    }
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(OnlstmError::EmptySentence(i));
    }
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One next-sentence identification example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QtBatch {
    pub context: Vec<Vec<usize>>,
    /// `K + 1` candidates; exactly one is the true next sentence.
    pub candidates: Vec<Vec<usize>>,
    pub correct: usize,
}

/// Samples a quick-thoughts example from recipe `idx` of `recipes`.
///
/// The context is a random window of `2..=m-1` consecutive sentences and the
/// correct candidate is the sentence right after it. Distractors come from
/// the same recipe outside the window and the correct sentence; when the
/// recipe runs out they are drawn from other recipes. Returns `None` for
/// recipes with fewer than 3 sentences.
pub fn sample_qt_batch(
    recipes: &[Vec<Vec<usize>>],
    idx: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Option<QtBatch> {
    let sents = &recipes[idx];
    let m = sents.len();
    if m < 3 {
        return None;
    }
    let len = rng.gen_range(2..=m - 1);
    let start = rng.gen_range(0..=m - 1 - len);
    let next = start + len;
    let mut pool: Vec<usize> = (0..m).filter(|&j| j < start || j > next).collect();
    pool.shuffle(rng);
    let mut candidates: Vec<Vec<usize>> = pool.iter().take(k).map(|&j| sents[j].clone()).collect();
    let total: usize = recipes.iter().map(Vec::len).sum();
    let mut attempts = 0;
    while candidates.len() < k {
        attempts += 1;
        let r = rng.gen_range(0..recipes.len());
        if recipes[r].is_empty() || (r == idx && attempts < 100 && total > m) {
            continue;
        }
        let j = rng.gen_range(0..recipes[r].len());
        candidates.push(recipes[r][j].clone());
    }
    let correct = rng.gen_range(0..=k);
    candidates.insert(correct, sents[next].clone());
    Some(QtBatch {
        context: sents[start..next].to_vec(),
        candidates,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QtTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "constant_schedule")]
    pub schedule: LrSchedule,
    /// Examples per parameter update.
    pub batch_size: usize,
    pub clip: Option<f64>,
    /// Distractors per example.
    pub k: usize,
    /// Minimum sentence count for a recipe to be used.
    pub min_sentences: usize,
    pub min_freq: usize,
    pub seed: u64,
}

fn constant_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl QtTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            schedule: LrSchedule::Constant,
            batch_size: 8,
            clip: Some(5.0),
            k: 3,
            min_sentences: 5,
            min_freq: 1,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 20,
            lr: 1.0,
            schedule: LrSchedule::Constant,
            batch_size: 60,
            clip: Some(5.0),
            k: 3,
            min_sentences: 5,
            min_freq: 1,
            seed: 0,
        }
    }
}

impl Default for QtTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QtEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

fn eligible(corpus: &Corpus, vocab: &Vocab, min_sentences: usize) -> Vec<Vec<Vec<usize>>> {
    corpus
        .recipes
        .iter()
        .filter(|r| r.num_sentences() >= min_sentences)
        .map(|r| {
            r.instructions
                .iter()
                .map(|s| s.iter().map(|t| vocab.index(t)).collect())
                .collect()
        })
        .collect()
}

/// Next-sentence identification accuracy on freshly sampled examples, one
/// per eligible recipe.
pub fn qt_accuracy(
    params: &Recipe2TreeParams,
    corpus: &Corpus,
    k: usize,
    min_sentences: usize,
    seed: u64,
) -> Result<f64, OnlstmError> {
    let recipes = eligible(corpus, &params.vocab, min_sentences.max(3));
    if recipes.is_empty() {
        return Err(OnlstmError::NoEligibleRecipes(min_sentences.max(3)));
    }
    let mut r = rng(seed);
    let mut hits = 0usize;
    for i in 0..recipes.len() {
        let batch = sample_qt_batch(&recipes, i, k, &mut r).expect("eligible recipe");
        let mut g = Graph::with_params(&params.store);
        let (_, ok) = params.qt_loss(&mut g, &batch);
        hits += usize::from(ok);
    }
    Ok(hits as f64 / recipes.len() as f64)
}

/// Trains both stacks on next-sentence identification with plain SGD.
pub fn train_recipe2tree(
    corpus: &Corpus,
    model: &Recipe2TreeConfig,
    train: &QtTrainConfig,
    held_out: Option<&Corpus>,
) -> Result<(Recipe2TreeParams, Vec<QtEpochLog>), OnlstmError> {
    if train.batch_size == 0 || train.k == 0 {
        return Err(OnlstmError::InvalidConfig(
            "batch_size and k must be positive".into(),
        ));
    }
    let min_sentences = train.min_sentences.max(3);
    let vocab = build_vocab(corpus, train.min_freq)?;
    let recipes = eligible(corpus, &vocab, min_sentences);
    if recipes.is_empty() {
        return Err(OnlstmError::NoEligibleRecipes(min_sentences));
    }
    let mut params = Recipe2TreeParams::new(model.clone(), vocab, train.seed)?;
    let mut r = rng(train.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(train.epochs);
    let mut order: Vec<usize> = (0..recipes.len()).collect();
    for epoch in 0..train.epochs {
        let mut opt = Sgd::new(train.schedule.lr_at(train.lr, epoch), train.clip);
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let mut acc = ParamGrads::new(params.store.len());
            for &i in chunk {
                let batch = sample_qt_batch(&recipes, i, train.k, &mut r).expect("eligible recipe");
                let mut g = Graph::with_params(&params.store);
                let (loss, ok) = params.qt_loss(&mut g, &batch);
                total += g.scalar(loss);
                hits += usize::from(ok);
                let grads = g.backward(loss);
                acc.accumulate(&g.param_grads(&grads));
            }
            acc.scale(1.0 / chunk.len() as f64);
            opt.step(&mut params.store, &acc);
        }
        let val_accuracy = match held_out {
            Some(c) => Some(qt_accuracy(&params, c, train.k, min_sentences, train.seed ^ 0x5eed)?),
            None => None,
        };
        let entry = QtEpochLog {
            epoch: epoch + 1,
            loss: total / recipes.len() as f64,
            accuracy: hits as f64 / recipes.len() as f64,
            val_accuracy,
        };
        log::info!(
            "recipe2tree epoch {} loss {:.4} acc {:.3}",
            entry.epoch,
            entry.loss,
            entry.accuracy
        );
        log.push(entry);
    }
    Ok((params, log))
}

/// Parses every recipe's split scores into a sentence tree.
pub fn derive_pseudo_trees(
    corpus: &Corpus,
    params: &Recipe2TreeParams,
) -> Result<TreeMap, OnlstmError> {
    let mut out = TreeMap::new();
    for recipe in &corpus.recipes {
        let sentences = params.encode_recipe_sentences(&recipe.instructions);
        let enc = params.encode_hierarchical(&sentences)?;
        let tree: SentenceTree = parse_from_scores(&enc.scores)?;
        out.insert(recipe.id.clone(), tree);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, Split, SynthSpec};
    use crate::nn::gradcheck::check_params;

    fn tiny_vocab(n: usize) -> Vocab {
        let counts = (0..n).map(|i| (format!("w{i}"), 1)).collect();
        Vocab::from_counts(counts, 1)
    }

    fn tiny_config() -> Recipe2TreeConfig {
        Recipe2TreeConfig {
            embed_dim: 4,
            levels: 3,
            chunk: 2,
            layers: 2,
            split_layer: None,
            init_gain: 1.0,
        }
    }

    #[test]
    fn expected_split_worked_values() {
        assert!((expected_split(&[0.25; 4]).unwrap() - 2.5).abs() < 1e-12);
        assert!((expected_split(&[0.0, 0.0, 1.0, 0.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!((expected_split(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(
            expected_split(&[0.5, 0.4]),
            Err(OnlstmError::NotNormalized(_))
        ));
    }

    #[test]
    fn zero_cell_gives_uniform_split_distributions() {
        let mut store = ParamStore::new();
        let cell = OrderedCell::new(&mut store, "c", 3, 4, 2, 1.0, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).scale_in_place(0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(1, 3));
        let h = g.constant(Tensor::zeros(1, 8));
        let c = g.constant(Tensor::zeros(1, 8));
        let s = cell.step(&mut g, x, h, c);
        for d in [s.d_f, s.d_i] {
            assert!(g.value(d).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn split_distributions_normalize_on_random_inputs() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let cell = OrderedCell::new(&mut store, "c", 5, 6, 3, 4.0, &mut r);
        let mut g = Graph::with_params(&store);
        let mut h = g.constant(Tensor::zeros(1, 18));
        let mut c = g.constant(Tensor::zeros(1, 18));
        for t in 0..10 {
            let x = g.constant(crate::nn::init::uniform(1, 5, 3.0, &mut rng(t)));
            let s = cell.step(&mut g, x, h, c);
            for d in [s.d_f, s.d_i] {
                assert!((g.value(d).sum() - 1.0).abs() < 1e-6);
            }
            assert!(g.value(s.h).is_finite());
            (h, c) = (s.h, s.c);
        }
    }

    #[test]
    fn cell_and_qt_head_pass_gradcheck() {
        let params = Recipe2TreeParams::new(tiny_config(), tiny_vocab(6), 11).unwrap();
        let batch = QtBatch {
            context: vec![vec![4, 5, 6], vec![7, 8]],
            candidates: vec![vec![5, 9], vec![4], vec![6, 7, 8], vec![9, 4]],
            correct: 2,
        };
        let err = check_params(&params.store, 12, |g| params.qt_loss(g, &batch).0);
        assert!(err < 1e-4, "gradcheck error {err}");
    }

    #[test]
    fn qt_probability_matches_direct_softmax() {
        let ctx = vec![0.3, -1.2, 0.5];
        let cands = vec![
            vec![1.0, 0.0, 2.0],
            vec![-0.5, 0.4, 0.1],
            vec![0.0, 0.0, 0.0],
            vec![2.0, 1.0, -1.0],
        ];
        let p = qt_probability(&ctx, &cands).unwrap();
        let logits: Vec<f64> = cands
            .iter()
            .map(|c| c.iter().zip(&ctx).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (pi, l) in p.iter().zip(&logits) {
            assert!((pi - l.exp() / z).abs() < 1e-6);
        }
        let same = qt_probability(&ctx, &vec![cands[0].clone(); 4]).unwrap();
        assert!(same.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let big = qt_probability(&[1.0], &[vec![1e6], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        assert!(big[0] > 1.0 - 1e-12);
        assert!(qt_probability(&ctx, &[vec![1.0]]).is_err());
    }

    #[test]
    fn qt_batches_keep_candidate_invariants() {
        let recipes: Vec<Vec<Vec<usize>>> = (0..5)
            .map(|r| (0..6).map(|j| vec![100 * r + j + 4]).collect())
            .collect();
        let mut rg = rng(9);
        for i in 0..200 {
            let b = sample_qt_batch(&recipes, i % 5, 3, &mut rg).unwrap();
            assert_eq!(b.candidates.len(), 4);
            let n = b.context.len();
            assert!((2..=5).contains(&n));
            let last = b.context[n - 1][0];
            let truth = vec![last + 1];
            assert_eq!(b.candidates[b.correct], truth);
            assert_eq!(b.candidates.iter().filter(|c| **c == truth).count(), 1);
            assert!(b.candidates.iter().all(|c| !b.context.contains(c)));
        }
        let short = vec![vec![vec![4], vec![5], vec![6]], vec![vec![7]; 2]];
        let b = sample_qt_batch(&short, 0, 3, &mut rg).unwrap();
        assert_eq!(b.candidates.len(), 4);
        assert!(sample_qt_batch(&short, 1, 3, &mut rg).is_none());
    }

    #[test]
    fn single_sentence_gives_single_score_and_leaf() {
        let params = Recipe2TreeParams::new(tiny_config(), tiny_vocab(4), 1).unwrap();
        let enc = params.encode_hierarchical(&[vec![4, 5]]).unwrap();
        assert_eq!(enc.scores.values.len(), 1);
        assert_eq!(parse_from_scores(&enc.scores).unwrap(), SentenceTree::single_leaf());
        assert!(matches!(
            params.encode_hierarchical(&[vec![4], vec![]]),
            Err(OnlstmError::EmptySentence(1))
        ));
        assert!(params.encode_hierarchical(&[]).is_err());
    }

    #[test]
    fn training_is_deterministic_and_makes_progress() {
        let corpus = synthesize_corpus(
            &SynthSpec {
                n_recipes: 40,
                sentence_count_range: (5, 8),
                ..SynthSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let cfg = Recipe2TreeConfig {
            embed_dim: 8,
            levels: 4,
            chunk: 2,
            layers: 1,
            split_layer: None,
            init_gain: 4.0,
        };
        let train = QtTrainConfig {
            epochs: 4,
            ..QtTrainConfig::desk()
        };
        let (p1, log1) = train_recipe2tree(&corpus, &cfg, &train, None).unwrap();
        let (p2, log2) = train_recipe2tree(&corpus, &cfg, &train, None).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(p1.store, p2.store);
        assert!(log1.last().unwrap().loss <= log1[0].loss);
        let trees = derive_pseudo_trees(&corpus, &p1).unwrap();
        assert_eq!(trees, derive_pseudo_trees(&corpus, &p2).unwrap());
        for r in &corpus.recipes {
            let t = trees.get(&r.id).unwrap();
            t.validate().unwrap();
            assert_eq!(t.num_leaves(), r.num_sentences());
        }
    }

    #[test]
    fn no_eligible_recipes_is_an_error() {
        let corpus = synthesize_corpus(
            &SynthSpec {
                n_recipes: 5,
                sentence_count_range: (2, 3),
                ..SynthSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let err = train_recipe2tree(&corpus, &tiny_config(), &QtTrainConfig::desk(), None);
        assert!(matches!(err, Err(OnlstmError::NoEligibleRecipes(5))));
    }
}
