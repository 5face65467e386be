use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{read_features, FeatureMap};

/// Longest instruction list in Recipe1M.
pub const MAX_SENTENCES: usize = 19;
pub const DEFAULT_IMAGE_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub title: String,
    /// Each entry is one vocabulary unit, possibly multi-word ("ground ginger").
    pub ingredients: Vec<String>,
    /// Sentences of word tokens.
    pub instructions: Vec<Vec<String>>,
    pub image_feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("instructions must not be empty")]
    NoInstructions,
    #[error("sentence count {0} exceeds the maximum of {MAX_SENTENCES} (must be ≤ 19)")]
    TooManySentences(usize),
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("ingredients must not be empty")]
    NoIngredients,
    #[error("image feature has dimension {found}, expected {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("duplicate recipe id")]
    DuplicateId,
}

impl Recipe {
    pub fn num_sentences(&self) -> usize {
        self.instructions.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.instructions.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, image_dim: usize) -> Result<(), Violation> {
        if self.instructions.is_empty() {
            return Err(Violation::NoInstructions);
        }
        if self.instructions.len() > MAX_SENTENCES {
            return Err(Violation::TooManySentences(self.instructions.len()));
        }
        if let Some(i) = self.instructions.iter().position(Vec::is_empty) {
            return Err(Violation::EmptySentence(i));
        }
        if self.ingredients.is_empty() {
            return Err(Violation::NoIngredients);
        }
        if self.image_feature.len() != image_dim {
            return Err(Violation::FeatureDim {
                expected: image_dim,
                found: self.image_feature.len(),
            });
        }
        Ok(())
    }

    pub fn image_feature_f64(&self) -> Vec<f64> {
        self.image_feature.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub recipes: Vec<Recipe>,
    pub split: Split,
}

impl Corpus {
    pub fn new(recipes: Vec<Recipe>, split: Split) -> Self {
        Self { recipes, split }
    }

    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.recipes.first().map(|r| r.image_feature.len())
    }

    /// Checks every recipe invariant plus id uniqueness.
    pub fn validate(&self, image_dim: usize) -> Result<(), Vec<RecordError>> {
        let mut seen = HashSet::new();
        let mut errors = Vec::new();
        for (i, r) in self.recipes.iter().enumerate() {
            if let Err(v) = r.validate(image_dim) {
                errors.push(RecordError::new(i + 1, &r.id, v));
            }
            if !seen.insert(r.id.as_str()) {
                errors.push(RecordError::new(i + 1, &r.id, Violation::DuplicateId));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Splits off the last `n` recipes.
    pub fn split_off(mut self, n: usize, split: Split) -> (Corpus, Corpus) {
        let at = self.recipes.len().saturating_sub(n);
        let tail = self.recipes.split_off(at);
        (self, Corpus::new(tail, split))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    /// 1-based line number (or position) of the record.
    pub line: usize,
    pub id: String,
    pub violation: Violation,
}

impl RecordError {
    fn new(line: usize, id: &str, violation: Violation) -> Self {
        Self {
            line,
            id: id.to_string(),
            violation,
        }
    }
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} (id {:?}): {}", self.line, self.id, self.violation)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("no image feature for recipe id {0:?}")]
    MissingFeature(String),
    #[error("invalid feature file: {0}")]
    FeatureFile(String),
    #[error("{} invalid record(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidRecords(Vec<RecordError>),
    #[error("corpus is empty")]
    Empty,
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Splits text into lowercase word tokens, detaching leading and trailing
/// punctuation into tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')'];
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let lower = piece.to_lowercase();
        let mut rest = lower.as_str();
        let mut leading = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
            leading.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().next_back().filter(|c| PUNCT.contains(c)) {
            trailing.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        out.extend(leading);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RecordOnDisk {
    id: String,
    #[serde(default)]
    title: String,
    ingredients: Vec<String>,
    instructions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_feature: Option<Vec<f32>>,
}

/// Where image features come from when loading.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Every record carries `image_feature` inline.
    Inline,
    /// Features are looked up by id in a sidecar file; inline values win.
    Sidecar(&'a Path),
}

/// Loads and validates a corpus file.
///
/// Every record is checked; if any fails, the whole load fails with the
/// complete list of offending records.
pub fn load_corpus(
    path: &Path,
    split: Split,
    features: FeatureSource<'_>,
    image_dim: usize,
) -> Result<Corpus, CorpusError> {
    let sidecar: Option<FeatureMap> = match features {
        FeatureSource::Inline => None,
        FeatureSource::Sidecar(p) => Some(read_features(p)?),
    };
    if let Some(map) = &sidecar {
        if map.dim != image_dim {
            return Err(CorpusError::FeatureFile(format!(
                "sidecar dimension {} does not match configured {}",
                map.dim, image_dim
            )));
        }
    }
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut recipes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordOnDisk =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        let image_feature = match (rec.image_feature, &sidecar) {
            (Some(f), _) => f,
            (None, Some(map)) => map
                .get(&rec.id)
                .cloned()
                .ok_or_else(|| CorpusError::MissingFeature(rec.id.clone()))?,
            (None, None) => return Err(CorpusError::MissingFeature(rec.id.clone())),
        };
        recipes.push(Recipe {
            id: rec.id,
            title: rec.title,
            ingredients: rec.ingredients.iter().map(|s| s.trim().to_lowercase()).collect(),
            instructions: rec.instructions.iter().map(|s| tokenize(s)).collect(),
            image_feature,
        });
    }
    let corpus = Corpus::new(recipes, split);
    corpus
        .validate(image_dim)
        .map_err(CorpusError::InvalidRecords)?;
    Ok(corpus)
}

/// Writes a corpus as line-delimited records. With `inline_features` false
/// the feature vectors are omitted and must be written to a sidecar.
pub fn save_corpus(corpus: &Corpus, path: &Path, inline_features: bool) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &corpus.recipes {
        let rec = RecordOnDisk {
            id: r.id.clone(),
            title: r.title.clone(),
            ingredients: r.ingredients.clone(),
            instructions: r.instructions.iter().map(|s| s.join(" ")).collect(),
            image_feature: inline_features.then(|| r.image_feature.clone()),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(n_sent: usize) -> Recipe {
        Recipe {
            id: "a".into(),
            title: "t".into(),
            ingredients: vec!["flour".into(), "water".into(), "salt".into(), "ground ginger".into()],
            instructions: (0..n_sent).map(|i| vec![format!("w{i}"), ".".into()]).collect(),
            image_feature: vec![0.0; DEFAULT_IMAGE_DIM],
        }
    }

    #[test]
    fn three_sentence_record_is_valid() {
        assert_eq!(recipe(3).validate(DEFAULT_IMAGE_DIM), Ok(()));
    }

    #[test]
    fn twenty_sentences_are_rejected() {
        let err = recipe(20).validate(DEFAULT_IMAGE_DIM).unwrap_err();
        assert_eq!(err, Violation::TooManySentences(20));
        assert!(err.to_string().contains("≤ 19"));
        assert_eq!(recipe(19).validate(DEFAULT_IMAGE_DIM), Ok(()));
    }

    #[test]
    fn empty_instructions_and_sentences_are_rejected() {
        assert_eq!(recipe(0).validate(DEFAULT_IMAGE_DIM), Err(Violation::NoInstructions));
        let mut r = recipe(2);
        r.instructions[1].clear();
        assert_eq!(r.validate(DEFAULT_IMAGE_DIM), Err(Violation::EmptySentence(1)));
        let mut r = recipe(2);
        r.ingredients.clear();
        assert_eq!(r.validate(DEFAULT_IMAGE_DIM), Err(Violation::NoIngredients));
        assert!(matches!(recipe(1).validate(8), Err(Violation::FeatureDim { .. })));
    }

    #[test]
    fn tokenizer_detaches_punctuation() {
        assert_eq!(
            tokenize("Mix the Flour, then (gently) stir."),
            vec!["mix", "the", "flour", ",", "then", "(", "gently", ")", "stir", "."]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let c = Corpus::new(vec![recipe(1), recipe(2)], Split::Train);
        let errs = c.validate(DEFAULT_IMAGE_DIM).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].violation, Violation::DuplicateId);
        assert_eq!(errs[0].line, 2);
    }
}
