//! Skip-gram word vectors with negative sampling, and nearest-neighbour
//! substitution for source-side data augmentation.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::textproc::{build_vocab, TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("corpus is empty after min_count filtering")]
    EmptyCorpus,
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("malformed embedding file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            min_count: 1,
            seed: 7,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2
            || self.window == 0
            || self.negatives == 0
            || self.min_count == 0
            || !(self.lr > 0.0)
        {
            return Err(EmbedError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub expansion_factor: usize,
    pub substitutions_per_sentence: usize,
    pub top_k: usize,
    pub min_similarity: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            expansion_factor: 10,
            substitutions_per_sentence: 1,
            top_k: 5,
            min_similarity: 0.5,
            seed: 11,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.expansion_factor == 0 || self.top_k == 0 {
            return Err(EmbedError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One vector per vocabulary token, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub vocab: Vocabulary,
    pub vectors: Vec<T>,
    pub dim: usize,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn vector(&self, id: TokenId) -> &[T] {
        &self.vectors[id as usize * self.dim..(id as usize + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[T]> {
        self.vocab.id(token).map(|id| self.vector(id))
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }

    /// Word-vector text format: "count dim" header, then "token v1 … vd".
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{} {}", self.vocab.len(), self.dim)?;
        for (i, tok) in self.vocab.tokens().iter().enumerate() {
            write!(w, "{tok}")?;
            for v in self.vector(i as TokenId) {
                write!(w, " {}", v)?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the text format. Specials missing from the file get zero vectors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .ok_or_else(|| EmbedError::Malformed("empty file".into()))??;
        let mut hp = header.split_whitespace().map(str::parse::<usize>);
        let (count, dim) = match (hp.next(), hp.next(), hp.next()) {
            (Some(Ok(c)), Some(Ok(d)), None) if d >= 1 => (c, d),
            _ => return Err(EmbedError::Malformed(format!("bad header {header:?}"))),
        };
        let mut rows: Vec<(String, Vec<T>)> = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default().to_string();
            let vals: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| EmbedError::Malformed(format!("{tok}: {e}")))?;
            if vals.len() != dim {
                return Err(EmbedError::Malformed(format!(
                    "{tok}: {} values, expected {dim}",
                    vals.len()
                )));
            }
            rows.push((tok, vals.into_iter().map(T::of).collect()));
        }
        if rows.len() != count {
            return Err(EmbedError::Malformed(format!(
                "{} rows, header says {count}",
                rows.len()
            )));
        }
        let vocab = Vocabulary::from_tokens(rows.iter().map(|(t, _)| t.clone()));
        let mut vectors = vec![T::zero(); vocab.len() * dim];
        for (tok, v) in rows {
            let id = vocab.id(&tok).expect("token was inserted") as usize;
            vectors[id * dim..(id + 1) * dim].copy_from_slice(&v);
        }
        Ok(Self {
            vocab,
            vectors,
            dim,
        })
    }
}

/// u·v / (‖u‖‖v‖), clamped to [−1, 1].
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, EmbedError> {
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipgramReport {
    /// Negative-sampling objective after each epoch, measured on a fixed
    /// draw of noise words so epochs are comparable.
    pub epoch_losses: Vec<f64>,
    /// Running mean of the objective seen during each epoch's updates.
    pub train_losses: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Mean objective over every (center, context) pair with noise words drawn
/// from a fixed seed.
fn evaluate_objective(
    sentences: &[Vec<usize>],
    input: &[f64],
    output: &[f64],
    d: usize,
    cfg: &SkipgramConfig,
    noise: &WeightedIndex<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let dot =
        |u: usize, o: usize| -> f64 { (0..d).map(|c| input[u * d + c] * output[o * d + c]).sum() };
    let mut loss = 0.0;
    let mut count = 0usize;
    for s in sentences {
        for (i, &center) in s.iter().enumerate() {
            let lo = i.saturating_sub(cfg.window);
            let hi = (i + cfg.window + 1).min(s.len());
            for (j, &context) in s.iter().enumerate().take(hi).skip(lo) {
                if j == i {
                    continue;
                }
                loss -= log_sigmoid(dot(center, context));
                for _ in 0..cfg.negatives {
                    let t = noise.sample(&mut rng);
                    if t != context {
                        loss -= log_sigmoid(-dot(center, t));
                    }
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        loss / count as f64
    }
}

/// Skip-gram with negative sampling. Noise words are drawn from unigram
/// counts raised to 3/4; the learning rate decays linearly to 1e-4 of its
/// initial value.
pub fn train_skipgram<T: Scalar, S: AsRef<str>>(
    corpus: &[Vec<S>],
    cfg: &SkipgramConfig,
) -> Result<(EmbeddingTable<T>, SkipgramReport), EmbedError> {
    cfg.validate()?;
    let vocab =
        build_vocab(corpus, cfg.min_count, usize::MAX).map_err(|_| EmbedError::EmptyCorpus)?;
    let d = cfg.dim;
    let n = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / d as f64;
    let mut input: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-half..half)).collect();
    let mut output = vec![0.0f64; n * d];

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| vocab.id(t.as_ref()))
                .map(|id| id as usize)
                .collect()
        })
        .collect();
    let mut counts = vec![0.0f64; n];
    for s in &sentences {
        for &id in s {
            counts[id] += 1.0;
        }
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75)))
        .map_err(|_| EmbedError::EmptyCorpus)?;

    let pairs_per_epoch: usize = sentences
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window))
                .sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1);
    let mut seen = 0usize;
    let mut grad = vec![0.0f64; d];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut count = 0usize;
        for &si in &order {
            let s = &sentences[si];
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(s.len());
                for (j, &context) in s.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - seen as f64 / total as f64).max(1e-4);
                    seen += 1;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let u = center * d;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let o = target * d;
                        let dot: f64 = (0..d).map(|c| input[u + c] * output[o + c]).sum();
                        loss -= if label == 1.0 {
                            log_sigmoid(dot)
                        } else {
                            log_sigmoid(-dot)
                        };
                        let g = (label - sigmoid(dot)) * lr;
                        for c in 0..d {
                            grad[c] += g * output[o + c];
                            output[o + c] += g * input[u + c];
                        }
                    }
                    for c in 0..d {
                        input[u + c] += grad[c];
                    }
                    count += 1;
                }
            }
        }
        train_losses.push(if count == 0 { 0.0 } else { loss / count as f64 });
        epoch_losses.push(evaluate_objective(
            &sentences, &input, &output, d, cfg, &noise,
        ));
    }
    // Published vectors are input + output; output rows start at zero so an
    // untrained table equals its initialization.
    let table = EmbeddingTable {
        vocab,
        vectors: input
            .iter()
            .zip(&output)
            .map(|(a, b)| T::of(a + b))
            .collect(),
        dim: d,
    };
    Ok((
        table,
        SkipgramReport {
            epoch_losses,
            train_losses,
        },
    ))
}

/// Top-k tokens by cosine similarity, excluding the query and specials.
/// Ties go to the lexicographically smaller token.
pub fn nearest_neighbors<T: Scalar>(
    tbl: &EmbeddingTable<T>,
    token: &str,
    k: usize,
) -> Result<Vec<(String, T)>, EmbedError> {
    let q = tbl
        .vocab
        .id(token)
        .ok_or_else(|| EmbedError::UnknownToken(token.to_string()))?;
    let qv = tbl.vector(q);
    let mut scored: Vec<(String, T)> = Vec::new();
    for (i, tok) in tbl.vocab.tokens().iter().enumerate() {
        let id = i as TokenId;
        if id == q || Vocabulary::is_special(id) {
            continue;
        }
        if let Ok(s) = cosine_similarity(qv, tbl.vector(id)) {
            scored.push((tok.clone(), s));
        }
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

pub type TokenPair = (Vec<String>, Vec<String>);

/// Each input pair followed by `expansion_factor − 1` variants whose source
/// side has up to `substitutions_per_sentence` tokens swapped for a random
/// qualifying neighbour. Targets are never touched.
pub fn augment_by_substitution<T: Scalar>(
    pairs: &[TokenPair],
    tbl: &EmbeddingTable<T>,
    cfg: &AugmentConfig,
) -> Result<Vec<TokenPair>, EmbedError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: std::collections::HashMap<String, Vec<String>> =
        std::collections::HashMap::new();
    let mut out = Vec::with_capacity(pairs.len() * cfg.expansion_factor);
    for (src, tgt) in pairs {
        out.push((src.clone(), tgt.clone()));
        if cfg.expansion_factor == 1 {
            continue;
        }
        let mut options: Vec<(usize, Vec<String>)> = Vec::new();
        for (i, tok) in src.iter().enumerate() {
            let nbrs = cache.entry(tok.clone()).or_insert_with(|| {
                nearest_neighbors(tbl, tok, cfg.top_k)
                    .map(|v| {
                        v.into_iter()
                            .filter(|(_, s)| s.f64() >= cfg.min_similarity)
                            .map(|(t, _)| t)
                            .collect()
                    })
                    .unwrap_or_default()
            });
            if !nbrs.is_empty() {
                options.push((i, nbrs.clone()));
            }
        }
        for _ in 1..cfg.expansion_factor {
            let mut variant = src.clone();
            let picks = cfg.substitutions_per_sentence.min(options.len());
            for (pos, nbrs) in options.choose_multiple(&mut rng, picks) {
                variant[*pos] = nbrs.choose(&mut rng).expect("non-empty").clone();
            }
            out.push((variant, tgt.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let direct = 1.0 / 2f64.sqrt();
        assert!((cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap() - direct).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(EmbedError::ZeroVector)
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
