//! The pipeline commands. Each reads its inputs from the work directory,
//! writes its artifacts back there and returns a summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sgn_core::checkpoint;
use sgn_core::corpus::{
    load_corpus, save_corpus, synthesize_corpus, write_features, Corpus, FeatureSource, Split,
};
use sgn_core::generator::{evaluate_generation, train_sgn, GenerationEval, SgnConfig, TreeBranch};
use sgn_core::metrics::{GenEvalResult, RetEvalResult};
use sgn_core::onlstm::{derive_pseudo_trees, train_recipe2tree};
use sgn_core::retrieval::{evaluate_retrieval, rank, train_retrieval, RetrievalConfig};
use sgn_core::treelib::TreeMap;

use crate::config::ExperimentConfig;
use crate::layout::Layout;
use crate::plots;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recipe2tree,
    Sgn,
    Retrieval,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Recipe2tree => "recipe2tree",
            Stage::Sgn => "sgn",
            Stage::Retrieval => "retrieval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Generation,
    Retrieval,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Generation => "generation",
            Task::Retrieval => "retrieval",
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_split(cfg: &ExperimentConfig, layout: &Layout, split: Split) -> Result<Corpus> {
    let path = layout.corpus(split);
    if !path.exists() {
        bail!(
            "missing {split} corpus at {}; run `sgn synthesize` first",
            path.display()
        );
    }
    let features = layout.features(split);
    let source = if features.exists() {
        FeatureSource::Sidecar(&features)
    } else {
        FeatureSource::Inline
    };
    load_corpus(&path, split, source, cfg.data.image_dim)
        .with_context(|| format!("loading {}", path.display()))
}

pub fn load_trees(layout: &Layout, split: Split) -> Result<TreeMap> {
    let path = layout.trees(split);
    if !path.exists() {
        bail!(
            "missing pseudo-trees for the {split} split at {}; run `sgn parse-trees` first",
            path.display()
        );
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    TreeMap::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require_checkpoint(layout: &Layout, stage: Stage) -> Result<std::path::PathBuf> {
    let path = layout.checkpoint(stage.as_str());
    if !path.exists() {
        bail!(
            "missing {} checkpoint at {}; run `sgn train {}` first",
            stage.as_str(),
            path.display(),
            stage.as_str()
        );
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeSummary {
    pub recipes: BTreeMap<Split, usize>,
}

pub fn synthesize(cfg: &ExperimentConfig, layout: &Layout) -> Result<SynthesizeSummary> {
    let dir = layout.corpus_dir();
    if dir.exists() && !dir.is_dir() {
        bail!("path conflict: {} exists and is not a directory", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut recipes = BTreeMap::new();
    for split in Split::ALL {
        if cfg.data.size(split) == 0 {
            continue;
        }
        let corpus = synthesize_corpus(&cfg.data.spec(split), split)?;
        save_corpus(&corpus, &layout.corpus(split), false)?;
        write_features(&corpus, &layout.features(split))?;
        recipes.insert(split, corpus.len());
    }
    write_json(
        &dir.join("meta.json"),
        &serde_json::json!({ "recipes": recipes, "config": cfg.to_json() }),
    )?;
    Ok(SynthesizeSummary { recipes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub final_loss: f64,
    pub checkpoint: String,
}

fn optional_split(cfg: &ExperimentConfig, layout: &Layout, split: Split) -> Result<Option<Corpus>> {
    if layout.corpus(split).exists() {
        Ok(Some(load_split(cfg, layout, split)?).filter(|c| !c.is_empty()))
    } else {
        Ok(None)
    }
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout, stage: Stage) -> Result<TrainSummary> {
    let run = cfg.to_json();
    let ckpt = layout.checkpoint(stage.as_str());
    let train_corpus = load_split(cfg, layout, Split::Train)?;
    let (epochs, final_loss) = match stage {
        Stage::Recipe2tree => {
            let val = optional_split(cfg, layout, Split::Val)?;
            let (params, log) = train_recipe2tree(
                &train_corpus,
                &cfg.recipe2tree.model,
                &cfg.recipe2tree_train(),
                val.as_ref(),
            )?;
            write_jsonl(&layout.log(stage.as_str()), &log)?;
            checkpoint::save_recipe2tree(&ckpt, &params, &run)?;
            (log.len(), log.last().map_or(f64::NAN, |l| l.loss))
        }
        Stage::Sgn => {
            let c = cfg.sgn_config();
            let trees = match c.branch {
                TreeBranch::Disabled => None,
                _ => Some(load_trees(layout, Split::Train)?),
            };
            let (model, log) = train_sgn(&train_corpus, trees.as_ref(), &c)?;
            write_jsonl(&layout.log(stage.as_str()), &log)?;
            checkpoint::save_sgn(&ckpt, &model, &run)?;
            (log.len(), log.last().map_or(f64::NAN, |l| l.loss))
        }
        Stage::Retrieval => {
            let trees = load_trees(layout, Split::Train)?;
            let val = match optional_split(cfg, layout, Split::Val)? {
                Some(v) if layout.trees(Split::Val).exists() => Some((v, load_trees(layout, Split::Val)?)),
                _ => None,
            };
            let (model, log) = train_retrieval(
                &train_corpus,
                &trees,
                &cfg.retrieval_config(),
                val.as_ref().map(|(c, t)| (c, t)),
            )?;
            write_jsonl(&layout.log(stage.as_str()), &log)?;
            checkpoint::save_retrieval(&ckpt, &model, &run)?;
            (log.len(), log.last().map_or(f64::NAN, |l| l.loss))
        }
    };
    Ok(TrainSummary {
        stage,
        epochs,
        final_loss,
        checkpoint: ckpt.display().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub trees: BTreeMap<Split, usize>,
}

pub fn parse_trees(cfg: &ExperimentConfig, layout: &Layout, splits: &[Split]) -> Result<ParseSummary> {
    let ckpt = require_checkpoint(layout, Stage::Recipe2tree)?;
    let params = checkpoint::load_recipe2tree(&ckpt)?;
    let explicit = !splits.is_empty();
    let splits: Vec<Split> = if explicit { splits.to_vec() } else { Split::ALL.to_vec() };
    let mut trees = BTreeMap::new();
    for split in splits {
        if !explicit && !layout.corpus(split).exists() {
            continue;
        }
        let corpus = load_split(cfg, layout, split)?;
        let map = derive_pseudo_trees(&corpus, &params)?;
        for (id, t) in map.iter() {
            t.validate().with_context(|| format!("parsed tree for {id} is invalid"))?;
        }
        write_text(&layout.trees(split), &map.to_text())?;
        write_json(
            &layout.trees_meta(split),
            &serde_json::json!({
                "split": split,
                "recipes": map.len(),
                "checkpoint": ckpt.display().to_string(),
                "config": cfg.to_json(),
            }),
        )?;
        trees.insert(split, map.len());
    }
    if trees.is_empty() {
        bail!("no corpus splits found; run `sgn synthesize` first");
    }
    Ok(ParseSummary { trees })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub task: Task,
    pub split: Split,
    pub recipes: usize,
    #[serde(flatten)]
    pub metrics: GenEvalResult,
    pub length_error: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: Task,
    pub split: Split,
    pub recipes: usize,
    pub subset_size: usize,
    pub n_subsets: usize,
    pub image_to_recipe: RetEvalResult,
    pub recipe_to_image: RetEvalResult,
    pub config: serde_json::Value,
}

fn generation_report(cfg: &ExperimentConfig, corpus: &Corpus, eval: &GenerationEval) -> GenerationReport {
    GenerationReport {
        task: Task::Generation,
        split: corpus.split,
        recipes: corpus.len(),
        metrics: eval.metrics.clone(),
        length_error: eval.length_error,
        config: cfg.to_json(),
    }
}

pub fn eval_generation(cfg: &ExperimentConfig, layout: &Layout, plots: bool) -> Result<GenerationReport> {
    let model = checkpoint::load_sgn(&require_checkpoint(layout, Stage::Sgn)?)?;
    let corpus = load_split(cfg, layout, Split::Test)?;
    let eval = evaluate_generation(&model, &corpus)?;
    let report = generation_report(cfg, &corpus, &eval);
    write_json(&layout.report("eval_generation"), &report)?;
    let text: String = eval
        .outputs
        .iter()
        .map(|o| format!("{}\t{}\n", o.id, o.tokens.join(" ")))
        .collect();
    write_text(&layout.output("generation.txt"), &text)?;
    if plots {
        let generated: Vec<usize> = eval.outputs.iter().map(|o| o.tokens.len()).collect();
        let reference: Vec<usize> = eval.outputs.iter().map(|o| o.reference.len()).collect();
        plots::length_histogram(&layout.plot("length_distribution"), &generated, &reference)?;
    }
    Ok(report)
}

pub fn eval_retrieval(cfg: &ExperimentConfig, layout: &Layout, plots: bool) -> Result<RetrievalReport> {
    let model = checkpoint::load_retrieval(&require_checkpoint(layout, Stage::Retrieval)?)?;
    let corpus = load_split(cfg, layout, Split::Test)?;
    let trees = load_trees(layout, Split::Test)?;
    let e = &cfg.eval;
    let (eval, embeddings) =
        evaluate_retrieval(&model, &corpus, &trees, &e.ks, e.subset_size, e.n_subsets, e.seed)?;
    let report = RetrievalReport {
        task: Task::Retrieval,
        split: Split::Test,
        recipes: corpus.len(),
        subset_size: e.subset_size,
        n_subsets: e.n_subsets,
        image_to_recipe: eval.image_to_recipe,
        recipe_to_image: eval.recipe_to_image,
        config: cfg.to_json(),
    };
    write_json(&layout.report("eval_retrieval"), &report)?;
    let mut dump = String::new();
    for (r, (img, rec)) in corpus.recipes.iter().zip(embeddings.images.iter().zip(&embeddings.recipes)) {
        dump.push_str(&serde_json::to_string(&serde_json::json!({"id": r.id, "image": img, "recipe": rec}))?);
        dump.push('\n');
    }
    write_text(&layout.output("retrieval_embeddings.jsonl"), &dump)?;
    if plots {
        let ranks = rank(&embeddings)?;
        plots::rank_histogram(&layout.plot("rank_distribution"), &ranks.image_to_recipe)?;
    }
    Ok(report)
}

/// One arm of a matched-seed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub final_loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub seed: u64,
    /// Seed of the per-epoch shuffle, shared by both arms.
    pub shuffle_seed: u64,
    pub tree: ArmResult,
    pub baseline: ArmResult,
    /// `tree − baseline` per metric.
    pub delta: BTreeMap<String, f64>,
    /// Whether the tree arm is at least as good, per metric with a direction.
    pub tree_not_worse: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: Task,
    pub tree_arm: String,
    pub baseline_arm: String,
    pub train_recipes: usize,
    pub eval_recipes: usize,
    pub seeds: Vec<u64>,
    pub pairs: Vec<SeedPair>,
    /// Seeds on which the tree arm is not worse, per metric.
    pub tree_not_worse_count: BTreeMap<String, usize>,
    pub config: serde_json::Value,
}

/// `Some(true)` if larger is better, `Some(false)` if smaller is, `None`
/// for descriptive metrics.
fn orientation(metric: &str) -> Option<bool> {
    if metric == "avg_length" {
        None
    } else if metric.ends_with("medr") || metric == "perplexity" || metric == "length_error" {
        Some(false)
    } else {
        Some(true)
    }
}

fn pair(seed: u64, tree: ArmResult, baseline: ArmResult) -> SeedPair {
    let mut delta = BTreeMap::new();
    let mut not_worse = BTreeMap::new();
    for (k, &t) in &tree.metrics {
        let b = baseline.metrics[k];
        delta.insert(k.clone(), t - b);
        if let Some(up) = orientation(k) {
            not_worse.insert(k.clone(), if up { t >= b } else { t <= b });
        }
    }
    SeedPair {
        seed,
        shuffle_seed: seed.wrapping_add(1),
        tree,
        baseline,
        delta,
        tree_not_worse: not_worse,
    }
}

fn gen_metrics(eval: &GenerationEval) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("perplexity".to_string(), eval.metrics.perplexity),
        ("bleu".to_string(), eval.metrics.bleu),
        ("rouge_l".to_string(), eval.metrics.rouge_l),
        ("avg_length".to_string(), eval.metrics.avg_length),
        ("length_error".to_string(), eval.length_error),
    ])
}

fn ret_metrics_map(prefix: &str, r: &RetEvalResult, out: &mut BTreeMap<String, f64>) {
    out.insert(format!("{prefix}_medr"), r.medr);
    for (k, v) in &r.r_at_k {
        out.insert(format!("{prefix}_r@{k}"), *v);
    }
}

/// Matched-seed runs with and without the tree branch.
pub fn ablate(cfg: &ExperimentConfig, layout: &Layout, task: Task) -> Result<AblationReport> {
    let train_corpus = load_split(cfg, layout, Split::Train)?;
    let test = load_split(cfg, layout, Split::Test)?;
    let trees = load_trees(layout, Split::Train)?;
    let mut pairs = Vec::with_capacity(cfg.ablate.seeds.len());
    let (tree_arm, baseline_arm) = match task {
        Task::Generation => (
            "tree branch enabled, joint loss with the configured weights",
            "tree slot removed (branch = zeroed) and lambda2 = 0",
        ),
        Task::Retrieval => ("parsed-tree GAT feature used", "tree feature replaced by zeros"),
    };
    let test_trees = match task {
        Task::Retrieval => Some(load_trees(layout, Split::Test)?),
        Task::Generation => None,
    };
    for &seed in &cfg.ablate.seeds {
        let mut arms = Vec::with_capacity(2);
        for with_tree in [true, false] {
            let arm = if with_tree { "tree" } else { "baseline" };
            let log_name = format!("ablate_{}_seed{seed}_{arm}", task.as_str());
            let result = match task {
                Task::Generation => {
                    let mut c: SgnConfig = cfg.sgn_config();
                    c.train.seed = seed;
                    if with_tree {
                        c.branch = TreeBranch::Enabled;
                    } else {
                        c.branch = TreeBranch::Zeroed;
                        c.weights.lambda2 = 0.0;
                    }
                    let (model, log) = train_sgn(&train_corpus, Some(&trees), &c)?;
                    write_jsonl(&layout.log(&log_name), &log)?;
                    let eval = evaluate_generation(&model, &test)?;
                    ArmResult {
                        final_loss: log.last().map_or(f64::NAN, |l| l.loss),
                        metrics: gen_metrics(&eval),
                    }
                }
                Task::Retrieval => {
                    let mut c: RetrievalConfig = cfg.retrieval_config();
                    c.train.seed = seed;
                    c.use_tree = with_tree;
                    let tt = test_trees.as_ref().expect("loaded for retrieval");
                    let (model, log) = train_retrieval(&train_corpus, &trees, &c, None)?;
                    write_jsonl(&layout.log(&log_name), &log)?;
                    let e = &cfg.eval;
                    let (eval, _) =
                        evaluate_retrieval(&model, &test, tt, &e.ks, e.subset_size, e.n_subsets, e.seed)?;
                    let mut metrics = BTreeMap::new();
                    ret_metrics_map("i2r", &eval.image_to_recipe, &mut metrics);
                    ret_metrics_map("r2i", &eval.recipe_to_image, &mut metrics);
                    ArmResult {
                        final_loss: log.last().map_or(f64::NAN, |l| l.loss),
                        metrics,
                    }
                }
            };
            log::info!("ablate {} seed {seed} {arm}: {:?}", task.as_str(), result.metrics);
            arms.push(result);
        }
        let baseline = arms.pop().expect("two arms");
        let tree = arms.pop().expect("two arms");
        pairs.push(pair(seed, tree, baseline));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &pairs {
        for (k, &ok) in &p.tree_not_worse {
            *counts.entry(k.clone()).or_default() += usize::from(ok);
        }
    }
    let report = AblationReport {
        task,
        tree_arm: tree_arm.to_string(),
        baseline_arm: baseline_arm.to_string(),
        train_recipes: train_corpus.len(),
        eval_recipes: test.len(),
        seeds: cfg.ablate.seeds.clone(),
        pairs,
        tree_not_worse_count: counts,
        config: cfg.to_json(),
    };
    write_json(&layout.report(&format!("ablate_{}", task.as_str())), &report)?;
    Ok(report)
}
