use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::recipe::{Corpus, CorpusError, Recipe};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ index map. Indices 0–3 are always `<pad>`, `<bos>`, `<eos>`,
/// `<unk>`; the rest are ordered by descending frequency, then
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_counts(counts: HashMap<String, usize>, min_freq: usize) -> Self {
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect::<Vec<_>>();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, idx: usize) -> &str {
        self.tokens.get(idx).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Vocabulary over instruction word tokens.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut counts = HashMap::new();
    for tok in corpus.recipes.iter().flat_map(|r| r.instructions.iter().flatten()) {
        *counts.entry(tok.clone()).or_insert(0) += 1;
    }
    Ok(Vocab::from_counts(counts, min_freq))
}

/// Vocabulary over whole ingredient units.
pub fn build_ingredient_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut counts = HashMap::new();
    for ing in corpus.recipes.iter().flat_map(|r| r.ingredients.iter()) {
        *counts.entry(ing.clone()).or_insert(0) += 1;
    }
    Ok(Vocab::from_counts(counts, min_freq))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedRecipe {
    /// Per-sentence word indices, unframed.
    pub sentences: Vec<Vec<usize>>,
    pub ingredients: Vec<usize>,
    /// Generation target: `BOS`, every sentence's tokens in order, `EOS`.
    pub target: Vec<usize>,
}

pub fn encode_recipe(recipe: &Recipe, words: &Vocab, ingredients: &Vocab) -> EncodedRecipe {
    let sentences: Vec<Vec<usize>> = recipe
        .instructions
        .iter()
        .map(|s| s.iter().map(|t| words.index(t)).collect())
        .collect();
    let mut target = Vec::with_capacity(recipe.num_tokens() + 2);
    target.push(BOS);
    target.extend(sentences.iter().flatten());
    target.push(EOS);
    EncodedRecipe {
        ingredients: recipe.ingredients.iter().map(|t| ingredients.index(t)).collect(),
        sentences,
        target,
    }
}

/// Inverse of [`encode_recipe`] up to `<unk>` substitution.
pub fn decode_recipe(
    enc: &EncodedRecipe,
    words: &Vocab,
    ingredients: &Vocab,
) -> (Vec<String>, Vec<Vec<String>>) {
    (
        enc.ingredients
            .iter()
            .map(|&i| ingredients.token(i).to_string())
            .collect(),
        enc.sentences
            .iter()
            .map(|s| s.iter().map(|&i| words.token(i).to_string()).collect())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, DEFAULT_IMAGE_DIM};

    fn corpus(sentences: &[&str]) -> Corpus {
        Corpus::new(
            vec![Recipe {
                id: "r".into(),
                title: String::new(),
                ingredients: vec!["flour".into(), "ground ginger".into()],
                instructions: sentences.iter().map(|s| crate::corpus::tokenize(s)).collect(),
                image_feature: vec![0.0; DEFAULT_IMAGE_DIM],
            }],
            Split::Train,
        )
    }

    #[test]
    fn one_recipe_vocab() {
        let v = build_vocab(&corpus(&["mix flour"]), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.contains("mix") && v.contains("flour"));
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.index("<eos>"), EOS);
    }

    #[test]
    fn min_freq_maps_rare_tokens_to_unk() {
        let v = build_vocab(&corpus(&["mix flour", "mix water"]), 2).unwrap();
        assert_eq!(v.index("flour"), UNK);
        assert_ne!(v.index("mix"), UNK);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let c = corpus(&["b a c", "c b", "c"]);
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["c", "b", "a"]);
        assert_eq!(build_vocab(&c, 1).unwrap(), v);
    }

    #[test]
    fn encode_frames_target_and_roundtrips() {
        let c = corpus(&["mix flour", "bake"]);
        let words = build_vocab(&c, 1).unwrap();
        let ings = build_ingredient_vocab(&c, 1).unwrap();
        let enc = encode_recipe(&c.recipes[0], &words, &ings);
        assert_eq!(
            enc.target,
            vec![BOS, words.index("mix"), words.index("flour"), words.index("bake"), EOS]
        );
        let (ing, sents) = decode_recipe(&enc, &words, &ings);
        assert_eq!(ing, c.recipes[0].ingredients);
        assert_eq!(sents, c.recipes[0].instructions);
        assert!(ings.contains("ground ginger"));
    }

    #[test]
    fn oov_tokens_encode_as_unk() {
        let c = corpus(&["mix flour"]);
        let words = build_vocab(&c, 1).unwrap();
        let ings = build_ingredient_vocab(&c, 1).unwrap();
        let mut r = c.recipes[0].clone();
        r.instructions[0].push("zest".into());
        let enc = encode_recipe(&r, &words, &ings);
        assert_eq!(*enc.sentences[0].last().unwrap(), UNK);
        let (_, sents) = decode_recipe(&enc, &words, &ings);
        assert_eq!(sents[0], vec!["mix", "flour", "<unk>"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let c = Corpus::new(vec![], Split::Train);
        assert!(matches!(build_vocab(&c, 1), Err(CorpusError::Empty)));
    }
}
