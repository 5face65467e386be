//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use sgn_cli::commands::{self, AblationReport, Stage, Task};
use sgn_cli::config::{ExperimentConfig, Preset};
use sgn_cli::layout::Layout;
use sgn_core::corpus::{build_vocab, synthesize_corpus, Split, SynthSpec, Vocab, BOS, EOS};
use sgn_core::generator::{
    evaluate_generation, train_sgn, DecoderConfig, GenItem, SgnConfig, SgnModel, TreeBranch,
};
use sgn_core::graph::Graph;
use sgn_core::img2tree::{DecodeMode, RnnKind, TreeGenConfig, TreeGenParams};
use sgn_core::metrics::{bleu, perplexity, ranks, rouge_l};
use sgn_core::nn::gradcheck::{check_inputs, check_params};
use sgn_core::nn::init::{rng, uniform, ModelRng};
use sgn_core::nn::{attention, causal_mask, Activation, ParamStore};
use sgn_core::onlstm::{
    derive_pseudo_trees, qt_probability, train_recipe2tree, OrderedCell, QtBatch, QtTrainConfig,
    Recipe2TreeConfig, Recipe2TreeParams,
};
use sgn_core::tensor::Tensor;
use sgn_core::treeenc::{neighbourhood_mask, GatParams};
use sgn_core::treelib::{
    adjacency_vector_to_tree, parse_from_scores, random_parents, tree_to_adjacency_matrix,
    tree_to_adjacency_vector, AdjacencyVector, SentenceTree, SplitScores, MAX_NODES,
};

const GRAD_TOL: f64 = 1e-4;
const NORM_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Line {
    id: usize,
    name: &'static str,
    budget: Duration,
    elapsed: Duration,
    outcome: Outcome,
}

impl Line {
    fn pass(&self) -> bool {
        self.outcome.pass && self.elapsed <= self.budget
    }

    fn print(&self) {
        let over = if self.elapsed > self.budget { " OVER BUDGET" } else { "" };
        println!(
            "{} criterion {:>2} {:<28} {:>8.2}s / {:>5}s{}  {}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            over,
            self.outcome.detail
        );
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn run(id: usize, name: &'static str, budget_secs: u64, f: impl FnOnce() -> Outcome) -> Line {
    let (outcome, elapsed) = timed(f);
    let line = Line {
        id,
        name,
        budget: Duration::from_secs(budget_secs),
        elapsed,
        outcome,
    };
    line.print();
    line
}

fn vocab(n: usize) -> Vocab {
    Vocab::from_counts((0..n).map(|i| (format!("w{i}"), 1)).collect::<HashMap<_, _>>(), 1)
}

fn random_tree(max_nodes: usize, r: &mut ModelRng) -> SentenceTree {
    let n = r.gen_range(1..=max_nodes);
    SentenceTree::from_parents(&random_parents(n, r)).expect("random parents form a tree")
}

fn codec_bijectivity() -> Outcome {
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=MAX_NODES);
        let parents = random_parents(n, &mut r);
        let tree = SentenceTree::from_parents(&parents).expect("valid parents");
        let v = tree_to_adjacency_vector(&tree);
        let back = adjacency_vector_to_tree(&v).expect("decodable");
        let from_parents = AdjacencyVector::from_parents(&parents).expect("valid parents");
        let ok = back == tree
            && tree_to_adjacency_vector(&back) == v
            && from_parents == v
            && v.is_tree_valid()
            && v.num_nodes() == n;
        mismatches += usize::from(!ok);
    }
    Outcome::new(mismatches == 0, format!("1000 trees, {mismatches} mismatches"))
}

fn parser_soundness() -> Outcome {
    let mut r = rng(2);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=19);
        let values: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let ok = match parse_from_scores(&SplitScores::new(values)) {
            Ok(tree) => {
                let order: Vec<Option<usize>> =
                    tree.leaves().iter().map(|&i| tree.nodes()[i].leaf).collect();
                tree.validate().is_ok()
                    && tree.num_leaves() == n
                    && order == (0..n).map(Some).collect::<Vec<_>>()
            }
            Err(_) => false,
        };
        bad += usize::from(!ok);
    }
    let mut variant = 0;
    for _ in 0..100 {
        let n = r.gen_range(1..=19);
        let values: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let (a, b) = (r.gen_range(0.1..10.0), r.gen_range(-10.0..10.0));
        let moved: Vec<f64> = values.iter().map(|x| a * x + b).collect();
        let same = parse_from_scores(&SplitScores::new(values)).ok()
            == parse_from_scores(&SplitScores::new(moved)).ok();
        variant += usize::from(!same);
    }
    Outcome::new(
        bad == 0 && variant == 0,
        format!("1000 parses, {bad} unsound; 100 scale/shift pairs, {variant} differ"),
    )
}

fn tiny_sgn_config() -> SgnConfig {
    let mut c = SgnConfig::desk();
    c.decoder = DecoderConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        max_len: 40,
    };
    c.tree.hidden = 6;
    c.tree.gat_heads = 2;
    c.branch = TreeBranch::Enabled;
    c
}

fn tiny_sgn() -> (SgnModel, GenItem) {
    let model = SgnModel::new(tiny_sgn_config(), 4, vocab(3), vocab(2)).expect("valid config");
    let item = GenItem {
        id: "r".into(),
        target: vec![BOS, 4, 5, 6, 4, EOS],
        ingredients: vec![4, 5],
        image: vec![0.2, -0.1, 0.5, 0.0],
        tree: Some(AdjacencyVector::from_parents(&[0, 0, 1]).expect("valid parents")),
    };
    (model, item)
}

fn gradient_fidelity() -> Outcome {
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let mut store = ParamStore::new();
    let cell = OrderedCell::new(&mut store, "cell", 3, 3, 2, 1.0, &mut rng(3));
    let (x, h, c) = (uniform(1, 3, 1.0, &mut rng(4)), uniform(1, 6, 0.5, &mut rng(5)), uniform(1, 6, 0.5, &mut rng(6)));
    let weights = uniform(1, 3, 1.0, &mut rng(7));
    errs.push((
        "ordered cell",
        check_params(&store, 16, |g| {
            let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
            let s = cell.step(g, xv, hv, cv);
            let w = g.constant(weights.clone());
            let parts = [g.mul(s.h, s.h), g.mul(s.c, s.c), g.mul(s.d_f, w), g.mul(s.d_i, w)];
            let cat = g.concat_cols(&parts);
            g.sum_all(cat)
        }),
    ));

    let config = Recipe2TreeConfig {
        embed_dim: 4,
        levels: 3,
        chunk: 2,
        layers: 2,
        split_layer: None,
        init_gain: 1.0,
    };
    let params = Recipe2TreeParams::new(config, vocab(6), 11).expect("valid config");
    let batch = QtBatch {
        context: vec![vec![4, 5, 6], vec![7, 8]],
        candidates: vec![vec![5, 9], vec![4], vec![6, 7, 8], vec![9, 4]],
        correct: 2,
    };
    errs.push(("qt head", check_params(&params.store, 12, |g| params.qt_loss(g, &batch).0)));

    let mut worst_tree: f64 = 0.0;
    for cell in [RnnKind::Gru, RnnKind::Plain] {
        let p = TreeGenParams::new(
            TreeGenConfig {
                image_dim: 5,
                hidden: 6,
                layers: 2,
                cell,
            },
            4,
        )
        .expect("valid config");
        let v = AdjacencyVector::from_parents(&[0, 0, 1, 1]).expect("valid parents");
        let f = uniform(1, 5, 1.0, &mut rng(8));
        worst_tree = worst_tree.max(check_params(&p.store, 16, |g| {
            let fv = g.constant(f.clone());
            p.model.nll(g, fv, &v).expect("valid target")
        }));
    }
    errs.push(("tree generator", worst_tree));

    let mut store = ParamStore::new();
    let gat = GatParams::new(&mut store, "gat", 3, 4, 2, Activation::Tanh, &mut rng(9));
    let tree = SentenceTree::from_parents(&[0, 0, 1, 1, 3]).expect("valid parents");
    let mask = neighbourhood_mask(&tree_to_adjacency_matrix(&tree)).expect("symmetric");
    let z = uniform(6, 3, 1.0, &mut rng(10));
    errs.push((
        "graph attention",
        check_params(&store, 12, |g| {
            let zv = g.constant(z.clone());
            let out = gat.forward(g, zv, &mask);
            let sq = g.mul(out, out);
            g.sum_all(sq)
        }),
    ));

    let inputs = vec![
        uniform(3, 4, 1.0, &mut rng(11)),
        uniform(5, 4, 1.0, &mut rng(12)),
        uniform(5, 2, 1.0, &mut rng(13)),
    ];
    let attn = check_inputs(&inputs, |g, v| {
        let o = attention(g, v[0], v[1], v[2], None);
        let sq = g.mul(o, o);
        g.sum_all(sq)
    });
    let (model, item) = tiny_sgn();
    let decoder = check_params(&model.store, 6, |g| {
        let mem = model
            .memory(g, &item.image, &item.ingredients, item.tree.as_ref())
            .expect("valid item");
        model.teacher_forced(g, &item.target, mem).expect("valid target").0
    });
    errs.push(("decoder attention", attn.max(decoder)));

    let pass = errs.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("max relative error: {detail}"))
}

fn row_sum_error(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn normalization() -> Outcome {
    let mut r = rng(14);
    let (mut split, mut qt, mut gat, mut dec): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for trial in 0..1000u64 {
        let levels = r.gen_range(2..=8);
        let mut store = ParamStore::new();
        let cell = OrderedCell::new(&mut store, "c", 3, levels, 2, 4.0, &mut rng(trial));
        let mut g = Graph::with_params(&store);
        let x = g.constant(uniform(1, 3, 3.0, &mut r));
        let h = g.constant(uniform(1, 2 * levels, 1.0, &mut r));
        let c = g.constant(uniform(1, 2 * levels, 1.0, &mut r));
        let s = cell.step(&mut g, x, h, c);
        split = split.max(row_sum_error(g.value(s.d_f))).max(row_sum_error(g.value(s.d_i)));

        let dim = r.gen_range(1..=16);
        let ctx: Vec<f64> = (0..dim).map(|_| r.gen_range(-4.0..4.0)).collect();
        let cands: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| r.gen_range(-4.0..4.0)).collect())
            .collect();
        let p = qt_probability(&ctx, &cands).expect("four candidates");
        qt = qt.max((p.iter().sum::<f64>() - 1.0).abs());

        let tree = random_tree(MAX_NODES, &mut r);
        let mask = neighbourhood_mask(&tree_to_adjacency_matrix(&tree)).expect("symmetric");
        let mut store = ParamStore::new();
        let layer = GatParams::new(&mut store, "g", 5, 6, 3, Activation::Tanh, &mut rng(trial));
        let mut g = Graph::with_params(&store);
        let z = g.constant(uniform(tree.num_nodes(), 5, 2.0, &mut r));
        for a in layer.attention(&mut g, z, &mask) {
            gat = gat.max(row_sum_error(g.value(a)));
        }

        // With V = I the attention output is the weight matrix itself.
        let (n, m, dk) = (r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=8));
        let mut eye = Tensor::zeros(m, m);
        for i in 0..m {
            eye.set(i, i, 1.0);
        }
        let mut g = Graph::new();
        let q = g.constant(uniform(n, dk, 3.0, &mut r));
        let k = g.constant(uniform(m, dk, 3.0, &mut r));
        let v = g.constant(eye);
        let cross = attention(&mut g, q, k, v, None);
        dec = dec.max(row_sum_error(g.value(cross)));
        let kk = g.constant(uniform(m, dk, 3.0, &mut r));
        let qq = g.constant(uniform(m, dk, 3.0, &mut r));
        let mask = causal_mask(m);
        let selfa = attention(&mut g, qq, kk, v, Some(&mask));
        dec = dec.max(row_sum_error(g.value(selfa)));
    }
    let worst = split.max(qt).max(gat).max(dec);
    Outcome::new(
        worst <= NORM_TOL,
        format!(
            "1000 trials, max |sum - 1|: split {split:.1e}, qt {qt:.1e}, gat {gat:.1e}, decoder {dec:.1e}"
        ),
    )
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn brute_force_rank(queries: &[Vec<f64>], targets: &[Vec<f64>], i: usize) -> usize {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut order: Vec<(f64, bool, usize)> = targets
        .iter()
        .enumerate()
        .map(|(j, t)| (dist(&queries[i], t), j == i, j))
        .collect();
    // Ties rank the true match last.
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    1 + order.iter().position(|e| e.2 == i).expect("present")
}

fn metric_oracles() -> Outcome {
    let mut notes = Vec::new();
    let b = bleu(&[words("a b c d")], &[words("a b c d e")]).expect("non-empty");
    let b_ok = (b - (-0.25f64).exp()).abs() < 1e-4;
    notes.push(format!("bleu {b:.4}"));
    let same = [words("the cat sat on the mat today")];
    let b1 = bleu(&same, &same).expect("non-empty");
    let b1_ok = (b1 - 1.0).abs() < 1e-4;
    let rl = rouge_l(&words("a c"), &words("a b c"), 1.0).expect("non-empty");
    let rl_ok = (rl - 0.8).abs() < 1e-4;
    notes.push(format!("rouge-l {rl:.4}"));

    let (model, item) = tiny_sgn();
    let (loss, _) = model.teacher_forced_loss(&item, item.tree.as_ref()).expect("valid item");
    let lp = model.token_logprobs(&item, item.tree.as_ref()).expect("valid item");
    let ppl = perplexity(&lp).expect("non-empty");
    let ppl_ok = (ppl - loss.exp()).abs() < 1e-6;
    notes.push(format!("ppl gap {:.1e}", (ppl - loss.exp()).abs()));

    let mut r = rng(15);
    let mut rank_bad = 0;
    for set in 0..100 {
        let n = r.gen_range(2..=40);
        let dim = r.gen_range(1..=6);
        // Integer grids make exact distance ties common.
        let draw = |r: &mut ModelRng| -> Vec<f64> {
            (0..dim)
                .map(|_| if set % 2 == 0 { r.gen_range(-2..=2) as f64 } else { r.gen_range(-1.0..1.0) })
                .collect()
        };
        let q: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut r)).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut r)).collect();
        let got = ranks(&q, &t);
        let want: Vec<usize> = (0..n).map(|i| brute_force_rank(&q, &t, i)).collect();
        rank_bad += usize::from(got != want);
    }
    notes.push(format!("{rank_bad}/100 rank sets differ"));
    Outcome::new(b_ok && b1_ok && rl_ok && ppl_ok && rank_bad == 0, notes.join(", "))
}

fn qt_learnability() -> Outcome {
    let spec = SynthSpec {
        n_recipes: 200,
        seed: 0,
        ..SynthSpec::default()
    };
    let train = synthesize_corpus(&spec, Split::Train).expect("valid spec");
    let held = synthesize_corpus(
        &SynthSpec {
            n_recipes: 100,
            seed: 1,
            id_prefix: "val".into(),
            ..SynthSpec::default()
        },
        Split::Val,
    )
    .expect("valid spec");
    let mut tc = QtTrainConfig::desk();
    tc.epochs = 50;
    let (_, log) = train_recipe2tree(&train, &Recipe2TreeConfig::desk(), &tc, Some(&held))
        .expect("training runs");
    let last = log.last().and_then(|e| e.val_accuracy).unwrap_or(0.0);
    let best = log.iter().filter_map(|e| e.val_accuracy).fold(0.0, f64::max);
    Outcome::new(
        last > 0.6,
        format!("held-out accuracy after 50 epochs {last:.3} (best {best:.3}), chance 0.25"),
    )
}

fn tree_validity() -> Outcome {
    let mut r = rng(16);
    let (mut calls, mut invalid, mut max_nodes) = (0, 0, 0);
    for draw in 0..25u64 {
        let dim = r.gen_range(2..=32);
        let mut config = TreeGenConfig::desk(dim);
        config.cell = if draw % 2 == 0 { RnnKind::Gru } else { RnnKind::Plain };
        let p = TreeGenParams::new(config, draw).expect("valid config");
        for _ in 0..20 {
            let f: Vec<f64> = (0..dim).map(|_| r.gen_range(-3.0..3.0)).collect();
            for mode in [DecodeMode::Argmax, DecodeMode::Sample] {
                calls += 1;
                match p.generate_tree(&f, mode, MAX_NODES, &mut r) {
                    Ok(v) => {
                        max_nodes = max_nodes.max(v.num_nodes());
                        if !v.is_tree_valid() || v.num_nodes() > MAX_NODES {
                            invalid += 1;
                        }
                    }
                    Err(_) => invalid += 1,
                }
            }
        }
    }
    Outcome::new(
        calls == 1000 && invalid == 0,
        format!("{calls} trees, {invalid} invalid, largest {max_nodes} nodes"),
    )
}

fn overfit() -> Outcome {
    let corpus = synthesize_corpus(
        &SynthSpec {
            n_recipes: 5,
            ..SynthSpec::default()
        },
        Split::Train,
    )
    .expect("valid spec");
    let parser = Recipe2TreeParams::new(
        Recipe2TreeConfig::desk(),
        build_vocab(&corpus, 1).expect("non-empty"),
        0,
    )
    .expect("valid config");
    let trees = derive_pseudo_trees(&corpus, &parser).expect("parsable");
    let mut config = SgnConfig::desk();
    config.train.epochs = 300;
    let (model, log) = train_sgn(&corpus, Some(&trees), &config).expect("training runs");
    let eval = evaluate_generation(&model, &corpus).expect("decodable");
    let exact = eval.outputs.iter().filter(|o| o.tokens == o.reference).count();
    let loss = log.last().map_or(f64::NAN, |e| e.l_gen);
    Outcome::new(
        exact == corpus.len(),
        format!("{exact}/{} exact with generated trees, final L_gen {loss:.2e}", corpus.len()),
    )
}

struct Pipeline {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    layout: Layout,
    setup: Duration,
}

fn pipeline() -> anyhow::Result<Pipeline> {
    let dir = tempfile::tempdir()?;
    let cfg = ExperimentConfig::load(Some(Preset::Desk), None, Some(dir.path()), &[])?;
    let layout = Layout::new(&cfg.paths.work_dir);
    let (res, setup) = timed(|| -> anyhow::Result<()> {
        commands::synthesize(&cfg, &layout)?;
        commands::train(&cfg, &layout, Stage::Recipe2tree)?;
        commands::parse_trees(&cfg, &layout, &[])?;
        Ok(())
    });
    res?;
    Ok(Pipeline {
        _dir: dir,
        cfg,
        layout,
        setup,
    })
}

fn metric(report: &AblationReport, seed: usize, tree: bool, key: &str) -> f64 {
    let arm = if tree { &report.pairs[seed].tree } else { &report.pairs[seed].baseline };
    arm.metrics.get(key).copied().unwrap_or(f64::NAN)
}

fn per_seed(report: &AblationReport, key: &str) -> String {
    (0..report.pairs.len())
        .map(|i| {
            format!(
                "seed {} {:.3} vs {:.3}",
                report.pairs[i].seed,
                metric(report, i, true, key),
                metric(report, i, false, key)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn failed(id: usize, name: &'static str, budget: u64, elapsed: Duration, err: &anyhow::Error) -> Line {
    let line = Line {
        id,
        name,
        budget: Duration::from_secs(budget),
        elapsed,
        outcome: Outcome::new(false, format!("error: {err:#}")),
    };
    line.print();
    line
}

fn ablation_criteria(lines: &mut Vec<Line>) {
    let (setup, setup_time) = timed(pipeline);
    let pipe = match setup {
        Ok(p) => p,
        Err(e) => {
            for (id, name, budget) in [
                (7, "length error direction", 900),
                (8, "bleu direction", 1200),
                (9, "retrieval r@1 direction", 1200),
            ] {
                lines.push(failed(id, name, budget, setup_time, &e));
            }
            return;
        }
    };

    let (gen, gen_time) = timed(|| commands::ablate(&pipe.cfg, &pipe.layout, Task::Generation));
    let elapsed = pipe.setup + gen_time;
    match gen {
        Ok(report) => {
            let n = report.pairs.len();
            let wins = (0..n)
                .filter(|&i| metric(&report, i, true, "length_error") < metric(&report, i, false, "length_error"))
                .count();
            lines.push(Line {
                id: 7,
                name: "length error direction",
                budget: Duration::from_secs(900),
                elapsed,
                outcome: Outcome::new(
                    n == 3 && wins >= 2,
                    format!("tree lower on {wins}/{n}: {}", per_seed(&report, "length_error")),
                ),
            });
            lines.last().expect("pushed").print();
            let wins = (0..n)
                .filter(|&i| metric(&report, i, true, "bleu") >= metric(&report, i, false, "bleu"))
                .count();
            lines.push(Line {
                id: 8,
                name: "bleu direction",
                budget: Duration::from_secs(1200),
                elapsed,
                outcome: Outcome::new(
                    n == 3 && wins >= 2,
                    format!("tree not lower on {wins}/{n}: {}", per_seed(&report, "bleu")),
                ),
            });
            lines.last().expect("pushed").print();
        }
        Err(e) => {
            lines.push(failed(7, "length error direction", 900, elapsed, &e));
            lines.push(failed(8, "bleu direction", 1200, elapsed, &e));
        }
    }

    let (ret, ret_time) = timed(|| commands::ablate(&pipe.cfg, &pipe.layout, Task::Retrieval));
    let elapsed = pipe.setup + ret_time;
    match ret {
        Ok(report) => {
            let n = report.pairs.len();
            let key = "i2r_r@1";
            let wins = (0..n)
                .filter(|&i| metric(&report, i, true, key) >= metric(&report, i, false, key))
                .count();
            let floor = (0..n).all(|i| metric(&report, i, true, key) >= 0.1 && metric(&report, i, false, key) >= 0.1);
            lines.push(Line {
                id: 9,
                name: "retrieval r@1 direction",
                budget: Duration::from_secs(1200),
                elapsed,
                outcome: Outcome::new(
                    n == 3 && wins >= 2 && floor,
                    format!(
                        "subset {}, tree not lower on {wins}/{n}, all arms >= 0.1: {floor}; {}",
                        pipe.cfg.eval.subset_size,
                        per_seed(&report, key)
                    ),
                ),
            });
            lines.last().expect("pushed").print();
        }
        Err(e) => lines.push(failed(9, "retrieval r@1 direction", 1200, elapsed, &e)),
    }
}

fn main() -> ExitCode {
    let mut lines = vec![
        run(1, "codec bijectivity", 1, codec_bijectivity),
        run(2, "parser soundness", 1, parser_soundness),
        run(3, "gradient fidelity", 30, gradient_fidelity),
        run(4, "normalization invariants", 60, normalization),
        run(5, "metric oracles", 10, metric_oracles),
        run(6, "qt learnability", 300, qt_learnability),
    ];
    ablation_criteria(&mut lines);
    lines.push(run(10, "generated tree validity", 60, tree_validity));
    lines.push(run(11, "overfit reconstruction", 300, overfit));

    lines.sort_by_key(|l| l.id);
    let passed = lines.iter().filter(|l| l.pass()).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
