//! Recipe data model, on-disk formats, the synthetic corpus generator and
//! vocabularies.
//!
//! # On-disk layout
//!
//! A corpus file is UTF-8, one JSON object per line:
//!
//! ```text
//! {"id":"r1","title":"ginger soup","ingredients":["ground ginger","water"],
//!  "instructions":["peel the ground ginger .","boil the water ."],
//!  "image_feature":[0.1, ...]}
//! ```
//!
//! `image_feature` is optional; when absent the vector is taken from a
//! feature sidecar (see [`features`]). Instructions are stored as
//! space-joined token strings and tokenized with [`tokenize`] on load, so
//! loading and re-saving a corpus is idempotent.

mod features;
mod recipe;
mod synth;
mod vocab;

pub use features::{read_features, write_features, FeatureMap};
pub use recipe::{
    load_corpus, save_corpus, tokenize, Corpus, CorpusError, FeatureSource, Recipe, RecordError,
    Split, Violation, DEFAULT_IMAGE_DIM, MAX_SENTENCES,
};
pub use synth::{
    derive_image_feature, ingredient_pool, stage_of, synthesize_corpus, ImageFeatureMode, SynthError,
    SynthSpec, STAGE_VERBS,
};
pub use vocab::{
    build_ingredient_vocab, build_vocab, decode_recipe, encode_recipe, EncodedRecipe, Vocab, BOS,
    EOS, PAD, UNK,
};
