//! Generation and retrieval metrics.
//!
//! BLEU is corpus-level: clipped n-gram matches and candidate n-gram totals
//! are summed over the corpus before forming precisions. When no unigram
//! matches at all the score is exactly 0; otherwise an order with zero
//! matches contributes `0.1 / total` instead of 0.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::euclidean;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("{candidates} candidates but {references} references")]
    CountMismatch { candidates: usize, references: usize },
    #[error("empty reference at position {0}")]
    EmptyReference(usize),
    #[error("need at least {needed} pairs, have {have}")]
    InsufficientPairs { needed: usize, have: usize },
    #[error("embedding dimension mismatch")]
    DimMismatch,
}

/// `exp(-mean log p)` over ground-truth token log-probabilities.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64, MetricsError> {
    if token_logprobs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BleuMean {
    #[default]
    Geometric,
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub mean: BleuMean,
    /// Numerator used for an order with zero matches.
    pub smoothing: f64,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            mean: BleuMean::Geometric,
            smoothing: 0.1,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with the default configuration.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, MetricsError> {
    bleu_with(candidates, references, &BleuConfig::default())
}

pub fn bleu_with<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    cfg: &BleuConfig,
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = vec![0usize; cfg.max_n];
    let mut totals = vec![0usize; cfg.max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=cfg.max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            if m > 0 {
                m as f64 / t as f64
            } else {
                cfg.smoothing / t.max(1) as f64
            }
        })
        .collect();
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let combined = match cfg.mean {
        BleuMean::Geometric => {
            (precisions.iter().map(|p| p.ln()).sum::<f64>() / cfg.max_n as f64).exp()
        }
        BleuMean::Arithmetic => precisions.iter().sum::<f64>() / cfg.max_n as f64,
    };
    Ok(bp * combined)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure; `beta = 1` is balanced F1, larger values weight recall.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference(0));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Mean ROUGE-L over aligned pairs.
pub fn corpus_rouge_l<T: Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    beta: f64,
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut total = 0.0;
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        total += rouge_l(c, r, beta).map_err(|_| MetricsError::EmptyReference(i))?;
    }
    Ok(total / candidates.len() as f64)
}

/// Mean token count.
pub fn avg_length<T>(seqs: &[Vec<T>]) -> Result<f64, MetricsError> {
    if seqs.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(seqs.iter().map(Vec::len).sum::<usize>() as f64 / seqs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEvalResult {
    pub perplexity: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub avg_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

/// Paired embeddings: `images[i]` belongs with `recipes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub images: Vec<Vec<f64>>,
    pub recipes: Vec<Vec<f64>>,
}

impl RankingReport {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Rank of the true match for every query: `1 + #{j ≠ i : d(q_i, t_j) ≤ d(q_i, t_i)}`.
///
/// Ties count against the query.
pub fn ranks(queries: &[Vec<f64>], targets: &[Vec<f64>]) -> Vec<usize> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let own = euclidean(q, &targets[i]);
            1 + targets
                .iter()
                .enumerate()
                .filter(|&(j, t)| j != i && euclidean(q, t) <= own)
                .count()
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetEvalResult {
    pub medr: f64,
    pub r_at_k: BTreeMap<usize, f64>,
    pub subset_size: usize,
    pub n_subsets: usize,
    pub direction: Direction,
}

impl RetEvalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.r_at_k.get(&k).copied()
    }
}

/// MedR and R@K averaged over `n_subsets` random subsets of `subset_size` pairs.
pub fn ret_metrics(
    report: &RankingReport,
    ks: &[usize],
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
    direction: Direction,
) -> Result<RetEvalResult, MetricsError> {
    let n = report.len();
    if report.recipes.len() != n {
        return Err(MetricsError::CountMismatch {
            candidates: n,
            references: report.recipes.len(),
        });
    }
    if subset_size == 0 || n_subsets == 0 || n < subset_size {
        return Err(MetricsError::InsufficientPairs {
            needed: subset_size.max(1),
            have: n,
        });
    }
    let dim = report.images[0].len();
    if report
        .images
        .iter()
        .chain(&report.recipes)
        .any(|v| v.len() != dim)
    {
        return Err(MetricsError::DimMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medr = 0.0;
    let mut recalls = vec![0.0; ks.len()];
    for _ in 0..n_subsets {
        let idx = sample(&mut rng, n, subset_size).into_vec();
        let img: Vec<Vec<f64>> = idx.iter().map(|&i| report.images[i].clone()).collect();
        let rec: Vec<Vec<f64>> = idx.iter().map(|&i| report.recipes[i].clone()).collect();
        let r = match direction {
            Direction::ImageToRecipe => ranks(&img, &rec),
            Direction::RecipeToImage => ranks(&rec, &img),
        };
        let rf: Vec<f64> = r.iter().map(|&x| x as f64).collect();
        medr += median(&rf);
        for (slot, &k) in recalls.iter_mut().zip(ks) {
            *slot += r.iter().filter(|&&x| x <= k).count() as f64 / subset_size as f64;
        }
    }
    Ok(RetEvalResult {
        medr: medr / n_subsets as f64,
        r_at_k: ks
            .iter()
            .zip(recalls)
            .map(|(&k, s)| (k, s / n_subsets as f64))
            .collect(),
        subset_size,
        n_subsets,
        direction,
    })
}
