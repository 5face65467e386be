//! Corpus to trees to trained models, through checkpoints and back.

use sgn_core::checkpoint;
use sgn_core::corpus::{load_corpus, save_corpus, synthesize_corpus, write_features, Corpus, FeatureSource, Split, SynthSpec};
use sgn_core::generator::{evaluate_generation, train_sgn, DecoderConfig, SgnConfig, TreeBranch};
use sgn_core::onlstm::{derive_pseudo_trees, train_recipe2tree, QtTrainConfig, Recipe2TreeConfig};
use sgn_core::retrieval::{evaluate_retrieval, train_retrieval, RetrievalConfig};
use sgn_core::treeenc::GatConfig;
use sgn_core::treelib::{TreeMap, MAX_NODES};

fn corpus(n: usize, seed: u64, split: Split) -> Corpus {
    synthesize_corpus(
        &SynthSpec {
            n_recipes: n,
            sentence_count_range: (3, 6),
            image_dim: 12,
            seed,
            id_prefix: split.as_str().to_string(),
            ..SynthSpec::default()
        },
        split,
    )
    .unwrap()
}

fn parsed(train: &Corpus, others: &[&Corpus]) -> (TreeMap, Vec<TreeMap>) {
    let model = Recipe2TreeConfig {
        embed_dim: 8,
        levels: 4,
        layers: 1,
        ..Recipe2TreeConfig::desk()
    };
    let tc = QtTrainConfig {
        epochs: 2,
        ..QtTrainConfig::desk()
    };
    let (params, log) = train_recipe2tree(train, &model, &tc, None).unwrap();
    assert_eq!(log.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r2t.ckpt");
    checkpoint::save_recipe2tree(&path, &params, &serde_json::json!({"stage": "test"})).unwrap();
    let restored = checkpoint::load_recipe2tree(&path).unwrap();
    let trees = derive_pseudo_trees(train, &params).unwrap();
    assert_eq!(derive_pseudo_trees(train, &restored).unwrap().to_text(), trees.to_text());
    for r in &train.recipes {
        let t = trees.get(&r.id).unwrap();
        t.validate().unwrap();
        assert_eq!(t.num_leaves(), r.num_sentences());
        assert!(t.num_nodes() <= MAX_NODES);
    }
    let rest = others.iter().map(|c| derive_pseudo_trees(c, &params).unwrap()).collect();
    (trees, rest)
}

#[test]
fn corpus_survives_a_disk_roundtrip_with_a_feature_sidecar() {
    let c = corpus(10, 3, Split::Val);
    let dir = tempfile::tempdir().unwrap();
    let (jsonl, feats) = (dir.path().join("val.jsonl"), dir.path().join("val.features"));
    save_corpus(&c, &jsonl, false).unwrap();
    write_features(&c, &feats).unwrap();
    let back = load_corpus(&jsonl, Split::Val, FeatureSource::Sidecar(&feats), 12).unwrap();
    assert_eq!(back.recipes, c.recipes);
    assert!(load_corpus(&jsonl, Split::Val, FeatureSource::Inline, 12).is_err());
}

#[test]
fn generator_checkpoint_reproduces_evaluation() {
    let train = corpus(12, 0, Split::Train);
    let test = corpus(4, 1, Split::Test);
    let (trees, _) = parsed(&train, &[]);
    let mut config = SgnConfig::desk();
    config.decoder = DecoderConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        max_len: 80,
    };
    config.tree.hidden = 8;
    config.tree.gat_heads = 2;
    config.train.epochs = 2;
    let (model, log) = train_sgn(&train, Some(&trees), &config).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.loss.is_finite() && e.l_tree > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sgn.ckpt");
    checkpoint::save_sgn(&path, &model, &serde_json::json!({"seed": 0})).unwrap();
    let restored = checkpoint::load_sgn(&path).unwrap();
    let (a, b) = (evaluate_generation(&model, &test).unwrap(), evaluate_generation(&restored, &test).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.outputs.len(), 4);
    assert!(a.outputs.iter().all(|o| o.tree_nodes.is_some_and(|n| n <= MAX_NODES)));
    assert!(checkpoint::load_retrieval(&path).is_err());

    config.branch = TreeBranch::Disabled;
    let (plain, _) = train_sgn(&train, None, &config).unwrap();
    assert!(evaluate_generation(&plain, &test).unwrap().outputs.iter().all(|o| o.tree_nodes.is_none()));
}

#[test]
fn retrieval_checkpoint_reproduces_rankings() {
    let train = corpus(16, 0, Split::Train);
    let test = corpus(8, 1, Split::Test);
    let (trees, rest) = parsed(&train, &[&test]);
    let mut config = RetrievalConfig::desk();
    config.word_dim = 8;
    config.sentence_dim = 8;
    config.ingredient_dim = 8;
    config.hidden = 8;
    config.gat = GatConfig::new(2, 8);
    config.common_dim = 16;
    config.train.epochs = 2;
    config.train.batch_size = 8;
    let (model, log) = train_retrieval(&train, &trees, &config, Some((&test, &rest[0]))).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.val_r1.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ret.ckpt");
    checkpoint::save_retrieval(&path, &model, &serde_json::json!({})).unwrap();
    let restored = checkpoint::load_retrieval(&path).unwrap();
    let a = evaluate_retrieval(&model, &test, &rest[0], &[1, 5], 8, 2, 0).unwrap();
    let b = evaluate_retrieval(&restored, &test, &rest[0], &[1, 5], 8, 2, 0).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0.image_to_recipe, b.0.image_to_recipe);
    let r5 = a.0.image_to_recipe.recall(5).unwrap();
    assert!(a.0.image_to_recipe.recall(1).unwrap() <= r5 && r5 <= 1.0);
    assert!(evaluate_retrieval(&model, &test, &rest[0], &[1], 9, 1, 0).is_err());
}
