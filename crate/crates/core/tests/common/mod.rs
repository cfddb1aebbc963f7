//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use lrnmt::decoding::{normalized_score, StepModel};
use lrnmt::nnet::NnetError;
use lrnmt::textproc::{TokenId, TokenIds, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line corpus BLEU: linear scans instead of hash maps, weights
/// 1/4, orders without n-grams on either side dropped, scale 100.
pub fn brute_force_bleu(pairs: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut ref_totals = [0u64; 4];
    let (mut hl, mut rl) = (0usize, 0usize);
    for (h, r) in pairs {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            if r.len() >= n {
                ref_totals[n - 1] += (r.len() - n + 1) as u64;
            }
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[u32]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
            let rgrams: Vec<&[u32]> = if r.len() >= n {
                (0..=r.len() - n).map(|i| &r[i..i + n]).collect()
            } else {
                Vec::new()
            };
            totals[n - 1] += grams.len() as u64;
            let mut seen: Vec<&[u32]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = grams.iter().filter(|x| *x == g).count();
                let in_r = rgrams.iter().filter(|x| *x == g).count();
                matches[n - 1] += in_h.min(in_r) as u64;
            }
        }
    }
    let active: Vec<usize> = (0..4)
        .filter(|&i| totals[i] > 0 || ref_totals[i] > 0)
        .collect();
    if active.is_empty() || active.iter().any(|&i| matches[i] == 0) {
        return 0.0;
    }
    let bp = if hl >= rl {
        1.0
    } else if hl == 0 {
        return 0.0;
    } else {
        (1.0 - rl as f64 / hl as f64).exp()
    };
    let w = 1.0 / active.len() as f64;
    let s: f64 = active
        .iter()
        .map(|&i| w * (matches[i] as f64 / totals[i] as f64).ln())
        .sum();
    100.0 * bp * s.exp()
}

/// Step model whose next-token distribution is a pseudo-random function of
/// the prefix.
pub struct HashedStub {
    pub vocab: usize,
    pub seed: u64,
    /// Logit spread; larger values give peakier distributions.
    pub temperature: f64,
}

impl HashedStub {
    pub fn row(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        prefix.hash(&mut h);
        self.seed.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| rng.gen_range(-1.0..1.0) * self.temperature)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| l - m - z.ln()).collect()
    }
}

impl StepModel for HashedStub {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, _: &TokenIds) -> Result<(), NnetError> {
        Ok(())
    }

    fn log_probs(&self, _: &(), prefixes: &[&[TokenId]]) -> Vec<Vec<f64>> {
        prefixes.iter().map(|p| self.row(p)).collect()
    }
}

/// Enumerate every sequence a decoder may emit (EOS-terminated or cut at
/// `max_len`) and return the best by normalized log-probability, ties to the
/// lexicographically smaller id sequence.
pub fn exhaustive_best<M: StepModel<State = ()>>(
    model: &M,
    max_len: usize,
    alpha: f64,
) -> (TokenIds, f64) {
    let mut best: Option<(TokenIds, f64, f64)> = None;
    let mut stack = vec![(vec![Vocabulary::BOS], 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = &model.log_probs(&(), &[&prefix])[0];
        for t in 2..model.vocab_size() as u32 {
            let mut ids = prefix.clone();
            ids.push(t);
            let l = lp + row[t as usize];
            if t == Vocabulary::EOS || ids.len() > max_len {
                let s = normalized_score(l, ids.len() - 1, alpha);
                let better = match &best {
                    None => true,
                    Some((bi, bs, _)) => s > *bs || (s == *bs && ids < *bi),
                };
                if better {
                    best = Some((ids, s, l));
                }
            } else {
                stack.push((ids, l));
            }
        }
    }
    let (ids, _, lp) = best.expect("at least one sequence");
    (ids, lp)
}

/// Greedy argmax decoding with ties to the lowest token id.
pub fn greedy<M: StepModel<State = ()>>(model: &M, max_len: usize) -> TokenIds {
    let mut ids = vec![Vocabulary::BOS];
    loop {
        let row = &model.log_probs(&(), &[&ids])[0];
        let mut best = 2usize;
        for t in 2..row.len() {
            if row[t] > row[best] {
                best = t;
            }
        }
        ids.push(best as u32);
        if best == Vocabulary::EOS as usize || ids.len() > max_len {
            return ids;
        }
    }
}

/// P(X ≥ k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(n: u64, k: u64, p: f64) -> f64 {
    let ln_choose = |n: u64, r: u64| -> f64 {
        (1..=r)
            .map(|i| ((n - r + i) as f64).ln() - (i as f64).ln())
            .sum()
    };
    (k..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum()
}
