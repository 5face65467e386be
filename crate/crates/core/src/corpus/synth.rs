//! Templated synthetic recipes.
//!
//! Sentence `j` of an `n`-sentence recipe opens with a verb from cooking
//! stage `round(j · 18 / (n - 1))`, so the stages increase strictly along a
//! recipe and the next sentence is identifiable from content alone. Each
//! sentence names one of the recipe's ingredients (cycling through the
//! list), optionally a second one and an adverb.
//!
//! In [`ImageFeatureMode::DerivedFromText`] the image vector is
//! `tanh(0.8 · bow + 1.5 · len)` where `bow` is the sum of fixed per-token
//! Gaussian vectors over all instruction tokens divided by `sqrt(#tokens)`
//! and `len` is a fixed Gaussian vector keyed by the sentence count. It
//! depends on the instructions only, not on the seed.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::recipe::{Corpus, Recipe, Split, MAX_SENTENCES};

/// Two interchangeable verbs per cooking stage, in stage order.
pub const STAGE_VERBS: [[&str; 2]; MAX_SENTENCES] = [
    ["preheat", "prepare"],
    ["wash", "rinse"],
    ["peel", "trim"],
    ["chop", "slice"],
    ["dice", "mince"],
    ["season", "salt"],
    ["marinate", "coat"],
    ["whisk", "beat"],
    ["mix", "combine"],
    ["heat", "warm"],
    ["saute", "sear"],
    ["fry", "brown"],
    ["add", "fold"],
    ["stir", "toss"],
    ["simmer", "boil"],
    ["bake", "roast"],
    ["drain", "strain"],
    ["garnish", "top"],
    ["serve", "plate"],
];

const BASES: [&str; 20] = [
    "ginger", "garlic", "onion", "pepper", "carrot", "butter", "flour", "sugar", "rice", "chicken",
    "beef", "tomato", "basil", "lemon", "cheese", "milk", "egg", "potato", "bean", "mushroom",
];
const MODIFIERS: [&str; 8] = [
    "ground", "fresh", "dried", "chopped", "sweet", "red", "green", "whole",
];
const ADVERBS: [&str; 6] = ["gently", "well", "slowly", "briefly", "evenly", "carefully"];
const DISHES: [&str; 6] = ["soup", "stew", "salad", "bake", "curry", "skillet"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFeatureMode {
    #[default]
    DerivedFromText,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_recipes: usize,
    /// Inclusive `[min, max]` sentence count, within `[1, 19]`.
    pub sentence_count_range: (usize, usize),
    /// Number of distinct ingredient units available to the generator.
    pub vocab_size: usize,
    pub image_feature_mode: ImageFeatureMode,
    pub image_dim: usize,
    pub seed: u64,
    /// Id prefix; ids are `<prefix>-<index>`.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "syn".to_string()
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_recipes: 200,
            sentence_count_range: (4, 8),
            vocab_size: 40,
            image_feature_mode: ImageFeatureMode::DerivedFromText,
            image_dim: 64,
            seed: 0,
            id_prefix: default_prefix(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidField {
        field,
        reason: reason.into(),
    }
}

pub fn ingredient_pool() -> Vec<String> {
    let mut pool: Vec<String> = BASES.iter().map(|b| b.to_string()).collect();
    for m in MODIFIERS {
        for b in BASES {
            pool.push(format!("{m} {b}"));
        }
    }
    pool
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.sentence_count_range;
        if lo < 1 || hi > MAX_SENTENCES || lo > hi {
            return Err(invalid(
                "sentence_count_range",
                format!("[{lo}, {hi}] must be a non-empty subrange of [1, {MAX_SENTENCES}]"),
            ));
        }
        if self.n_recipes == 0 {
            return Err(invalid("n_recipes", "must be positive"));
        }
        let pool = ingredient_pool().len();
        if self.vocab_size < 2 || self.vocab_size > pool {
            return Err(invalid(
                "vocab_size",
                format!("{} outside [2, {pool}]", self.vocab_size),
            ));
        }
        if self.image_dim == 0 {
            return Err(invalid("image_dim", "must be positive"));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fixed Gaussian vector keyed by a string.
fn keyed_vector(key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct FeatureDeriver {
    dim: usize,
    cache: HashMap<String, Vec<f64>>,
}

impl FeatureDeriver {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            cache: HashMap::new(),
        }
    }

    fn vector(&mut self, key: &str) -> &Vec<f64> {
        let dim = self.dim;
        self.cache
            .entry(key.to_string())
            .or_insert_with(|| keyed_vector(key, dim))
    }

    fn derive(&mut self, instructions: &[Vec<String>]) -> Vec<f32> {
        let mut bow = vec![0.0; self.dim];
        let mut count = 0usize;
        for tok in instructions.iter().flatten() {
            let v = self.vector(&format!("tok:{tok}")).clone();
            for (b, x) in bow.iter_mut().zip(&v) {
                *b += x;
            }
            count += 1;
        }
        let norm = (count.max(1) as f64).sqrt();
        let len = self.vector(&format!("len:{}", instructions.len())).clone();
        bow.iter()
            .zip(&len)
            .map(|(b, l)| (0.8 * b / norm + 1.5 * l).tanh() as f32)
            .collect()
    }
}

/// Stage index of sentence `j` in an `n`-sentence recipe.
pub fn stage_of(j: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let last = (MAX_SENTENCES - 1) as f64;
    (j as f64 * last / (n - 1) as f64).round() as usize
}

/// Derived-from-text image feature for a list of tokenized sentences.
pub fn derive_image_feature(instructions: &[Vec<String>], dim: usize) -> Vec<f32> {
    FeatureDeriver::new(dim).derive(instructions)
}

/// Generates a corpus that is a pure function of `spec`.
pub fn synthesize_corpus(spec: &SynthSpec, split: Split) -> Result<Corpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool: Vec<String> = ingredient_pool().into_iter().take(spec.vocab_size).collect();
    let mut deriver = FeatureDeriver::new(spec.image_dim);
    let (lo, hi) = spec.sentence_count_range;
    let mut recipes = Vec::with_capacity(spec.n_recipes);
    for idx in 0..spec.n_recipes {
        let n = rng.gen_range(lo..=hi);
        let k = rng.gen_range(2..=5usize).min(pool.len());
        let ingredients: Vec<String> = pool.choose_multiple(&mut rng, k).cloned().collect();
        let mut instructions = Vec::with_capacity(n);
        for j in 0..n {
            let verbs = STAGE_VERBS[stage_of(j, n)];
            let mut s = vec![verbs[rng.gen_range(0..2)].to_string(), "the".to_string()];
            s.extend(ingredients[j % k].split_whitespace().map(str::to_string));
            if rng.gen_bool(0.3) {
                s.push("and".into());
                s.push("the".into());
                s.extend(ingredients[(j + 1) % k].split_whitespace().map(str::to_string));
            }
            if rng.gen_bool(0.3) {
                s.push(ADVERBS.choose(&mut rng).unwrap().to_string());
            }
            s.push(".".into());
            instructions.push(s);
        }
        let image_feature = match spec.image_feature_mode {
            ImageFeatureMode::DerivedFromText => deriver.derive(&instructions),
            ImageFeatureMode::Random => (0..spec.image_dim)
                .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect(),
        };
        let dish = DISHES.choose(&mut rng).unwrap();
        recipes.push(Recipe {
            id: format!("{}-{idx:05}", spec.id_prefix),
            title: format!("{} {dish}", ingredients[0]),
            ingredients,
            instructions,
            image_feature,
        });
    }
    Ok(Corpus::new(recipes, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_gives_identical_corpora() {
        let spec = SynthSpec {
            n_recipes: 30,
            seed: 7,
            ..SynthSpec::default()
        };
        let a = synthesize_corpus(&spec, Split::Train).unwrap();
        let b = synthesize_corpus(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = synthesize_corpus(&SynthSpec { seed: 8, ..spec }, Split::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sentence_counts_respect_range() {
        let spec = SynthSpec {
            n_recipes: 100,
            sentence_count_range: (4, 8),
            ..SynthSpec::default()
        };
        let c = synthesize_corpus(&spec, Split::Train).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.recipes.iter().all(|r| (4..=8).contains(&r.num_sentences())));
        assert!(c.validate(spec.image_dim).is_ok());
    }

    #[test]
    fn derived_features_depend_only_on_instructions() {
        let spec = SynthSpec {
            n_recipes: 5,
            ..SynthSpec::default()
        };
        let c = synthesize_corpus(&spec, Split::Train).unwrap();
        let mut twin = c.recipes[0].clone();
        twin.id = "other".into();
        twin.ingredients = vec!["salt".into()];
        twin.title = "different".into();
        let f = derive_image_feature(&twin.instructions, spec.image_dim);
        assert_eq!(f, c.recipes[0].image_feature);
    }

    #[test]
    fn stages_increase_strictly_along_a_recipe() {
        for n in 1..=MAX_SENTENCES {
            let stages: Vec<usize> = (0..n).map(|j| stage_of(j, n)).collect();
            assert!(stages.windows(2).all(|w| w[0] < w[1]), "n={n}: {stages:?}");
            assert!(stages.iter().all(|&s| s < MAX_SENTENCES));
        }
    }

    #[test]
    fn invalid_range_names_the_field() {
        let spec = SynthSpec {
            sentence_count_range: (5, 3),
            ..SynthSpec::default()
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("sentence_count_range"));
        let spec = SynthSpec {
            sentence_count_range: (1, 20),
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
