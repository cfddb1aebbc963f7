//! Competition BLEU: clipped n-gram precisions (exact rationals), brevity
//! penalty, geometric mean, corpus aggregation and the four-direction average.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::textproc::{to_halfwidth, tokenize, Sentence, TokenizerMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BleuError {
    #[error("empty hypothesis with non-empty reference (length {ref_len})")]
    DegenerateInput { ref_len: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("expected exactly 4 direction reports, got {0}")]
    WrongArity(usize),
    #[error("invalid BLEU configuration: {0}")]
    InvalidConfig(String),
}

/// Non-negative rational; a zero denominator denotes "no n-grams" and
/// evaluates to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value<T: Scalar>(self) -> T {
        if self.den == 0 {
            T::zero()
        } else {
            T::of(self.num as f64) / T::of(self.den as f64)
        }
    }

    /// Cross-multiplied equality, so 2/4 == 1/2.
    pub fn same_value(self, other: Rational) -> bool {
        if self.den == 0 || other.den == 0 {
            return self.num == 0 && other.num == 0;
        }
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<Rational>,
    pub tokenizer_mode: TokenizerMode,
    pub scale: f64,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::new(TokenizerMode::Word)
    }
}

impl BleuConfig {
    /// N = 4, uniform weights 1/4, reported ×100.
    pub fn new(mode: TokenizerMode) -> Self {
        Self {
            max_n: 4,
            weights: vec![Rational::new(1, 4); 4],
            tokenizer_mode: mode,
            scale: 100.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<(), BleuError> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(BleuError::InvalidConfig(format!(
                "{} weights for max_n = {}",
                self.weights.len(),
                self.max_n
            )));
        }
        // Σ num_i/den_i == 1, computed exactly over a common denominator.
        let mut num: u128 = 0;
        let mut den: u128 = 1;
        for w in &self.weights {
            if w.den == 0 {
                return Err(BleuError::InvalidConfig("zero weight denominator".into()));
            }
            num = num * w.den as u128 + w.num as u128 * den;
            den *= w.den as u128;
        }
        if num != den {
            return Err(BleuError::InvalidConfig("weights must sum to 1".into()));
        }
        if !(self.scale > 0.0) {
            return Err(BleuError::InvalidConfig("scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport<T = f64> {
    pub bleu: T,
    pub precisions: Vec<T>,
    pub brevity_penalty: T,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Clipped matches per order.
    pub matches: Vec<u64>,
    /// Hypothesis n-gram totals per order.
    pub totals: Vec<u64>,
}

impl<T: Scalar> fmt::Display for BleuReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2} (BP = {:.3}, ",
            self.bleu, self.brevity_penalty
        )?;
        write!(f, "ratio = {}/{}, P = ", self.hyp_len, self.ref_len)?;
        let ps: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", p.f64() * 100.0))
            .collect();
        write!(f, "{})", ps.join("/"))
    }
}

/// Multiset of contiguous n-grams.
pub fn ngram_counts<K: Eq + Hash>(tokens: &[K], n: usize) -> HashMap<&[K], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Σ_k min(count_hyp(k), count_ref(k)) / Σ_k count_hyp(k) over hypothesis
/// n-grams k.
pub fn modified_precision<K: Eq + Hash>(hyp: &[K], reference: &[K], n: usize) -> Rational {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let mut num = 0u64;
    let mut den = 0u64;
    for (gram, &c) in &h {
        num += c.min(*r.get(gram).unwrap_or(&0)) as u64;
        den += c as u64;
    }
    Rational::new(num, den)
}

/// 1 when the hypothesis is at least as long as the reference, otherwise
/// exp(1 − ref/hyp).
pub fn brevity_penalty<T: Scalar>(hyp_len: usize, ref_len: usize) -> Result<T, BleuError> {
    if hyp_len >= ref_len {
        return Ok(T::one());
    }
    if hyp_len == 0 {
        return Err(BleuError::DegenerateInput { ref_len });
    }
    Ok((T::one() - T::of(ref_len as f64) / T::of(hyp_len as f64)).exp())
}

/// Assemble a report from summed counts.
fn assemble<T: Scalar>(
    matches: Vec<u64>,
    totals: Vec<u64>,
    ref_totals: &[u64],
    hyp_len: usize,
    ref_len: usize,
    cfg: &BleuConfig,
) -> BleuReport<T> {
    let precisions: Vec<T> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| Rational::new(m, t).value())
        .collect();
    let bp = brevity_penalty::<T>(hyp_len, ref_len).unwrap_or_else(|_| T::zero());
    // Orders where neither side has any n-gram carry no evidence and are
    // dropped with their weight redistributed; otherwise identical short
    // segments could never reach the maximum score.
    let active: Vec<usize> = (0..cfg.max_n)
        .filter(|&i| totals[i] > 0 || ref_totals[i] > 0)
        .collect();
    let weight_sum: T = active.iter().map(|&i| cfg.weights[i].value::<T>()).sum();
    let bleu = if active.is_empty()
        || active.iter().any(|&i| matches[i] == 0)
        || bp == T::zero()
        || weight_sum == T::zero()
    {
        T::zero()
    } else {
        let log_sum: T = active
            .iter()
            .map(|&i| cfg.weights[i].value::<T>() / weight_sum * precisions[i].ln())
            .sum();
        T::of(cfg.scale) * bp * log_sum.exp()
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
        matches,
        totals,
    }
}

#[derive(Default)]
struct Stats {
    matches: Vec<u64>,
    totals: Vec<u64>,
    ref_totals: Vec<u64>,
    hyp_len: usize,
    ref_len: usize,
}

impl Stats {
    fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ref_totals: vec![0; max_n],
            ..Default::default()
        }
    }

    fn add<K: Eq + Hash>(&mut self, hyp: &[K], reference: &[K]) {
        for n in 1..=self.matches.len() {
            let p = modified_precision(hyp, reference, n);
            self.matches[n - 1] += p.num;
            self.totals[n - 1] += p.den;
            self.ref_totals[n - 1] += reference.len().saturating_sub(n - 1) as u64;
        }
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
    }
}

/// BLEU of one tokenized pair.
pub fn sentence_bleu_tokens<T: Scalar, K: Eq + Hash>(
    hyp: &[K],
    reference: &[K],
    cfg: &BleuConfig,
) -> BleuReport<T> {
    let mut s = Stats::new(cfg.max_n);
    s.add(hyp, reference);
    assemble(
        s.matches,
        s.totals,
        &s.ref_totals,
        s.hyp_len,
        s.ref_len,
        cfg,
    )
}

/// Tokenize for scoring: char mode folds full-width forms first.
pub fn score_tokens(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Char => tokenize(&to_halfwidth(text), mode),
        TokenizerMode::Word => tokenize(text, mode),
    }
}

pub fn sentence_bleu<T: Scalar>(
    hyp: &Sentence,
    reference: &Sentence,
    cfg: &BleuConfig,
) -> BleuReport<T> {
    let h = score_tokens(&hyp.text, cfg.tokenizer_mode);
    let r = score_tokens(&reference.text, cfg.tokenizer_mode);
    sentence_bleu_tokens(&h, &r, cfg)
}

/// Corpus BLEU over tokenized pairs: counts and lengths are summed before
/// the formula is applied.
pub fn corpus_bleu_tokens<T: Scalar, K: Eq + Hash, H: AsRef<[K]>, R: AsRef<[K]>>(
    pairs: &[(H, R)],
    cfg: &BleuConfig,
) -> Result<BleuReport<T>, BleuError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(BleuError::EmptyCorpus);
    }
    let mut s = Stats::new(cfg.max_n);
    for (h, r) in pairs {
        s.add(h.as_ref(), r.as_ref());
    }
    Ok(assemble(
        s.matches,
        s.totals,
        &s.ref_totals,
        s.hyp_len,
        s.ref_len,
        cfg,
    ))
}

pub fn corpus_bleu<T: Scalar>(
    pairs: &[(Sentence, Sentence)],
    cfg: &BleuConfig,
) -> Result<BleuReport<T>, BleuError> {
    let toks: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|(h, r)| {
            (
                score_tokens(&h.text, cfg.tokenizer_mode),
                score_tokens(&r.text, cfg.tokenizer_mode),
            )
        })
        .collect();
    corpus_bleu_tokens(&toks, cfg)
}

/// Arithmetic mean of the four direction scores used for the final ranking.
pub fn leaderboard_average<T: Scalar>(scores: &[T]) -> Result<T, BleuError> {
    if scores.len() != 4 {
        return Err(BleuError::WrongArity(scores.len()));
    }
    Ok(scores.iter().copied().sum::<T>() / T::of(4.0))
}

pub fn leaderboard_average_reports<T: Scalar>(reports: &[BleuReport<T>]) -> Result<T, BleuError> {
    let scores: Vec<T> = reports.iter().map(|r| r.bleu).collect();
    leaderboard_average(&scores)
}
