//! Beam search and Hamming-diverse beam search over any step model.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nnet::{EncodedSource, NnetError, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::textproc::{TokenId, TokenIds, Vocabulary};

/// Next-token distributions for prefixes of one source sentence.
pub trait StepModel {
    type State;

    fn vocab_size(&self) -> usize;

    fn start(&self, src: &TokenIds) -> Result<Self::State, NnetError>;

    /// Log-probabilities over the whole vocabulary after each prefix.
    fn log_probs(&self, state: &Self::State, prefixes: &[&[TokenId]]) -> Vec<Vec<f64>>;
}

impl<T: Scalar> StepModel for Seq2SeqModel<T> {
    type State = EncodedSource<T>;

    fn vocab_size(&self) -> usize {
        self.hyper.tgt_vocab
    }

    fn start(&self, src: &TokenIds) -> Result<Self::State, NnetError> {
        self.encode_source(src)
    }

    fn log_probs(&self, state: &Self::State, prefixes: &[&[TokenId]]) -> Vec<Vec<f64>> {
        self.next_log_probs(state, prefixes)
            .into_iter()
            .map(|row| row.into_iter().map(Scalar::f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// BOS, generated tokens, and EOS unless truncated at max_len.
    pub ids: TokenIds,
    /// Model log-probability of the generated tokens, without penalties.
    pub logprob: f64,
    pub group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Hypothesis {
    /// Generated tokens, counting EOS.
    pub fn generated_len(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    pub fn is_finished(&self) -> bool {
        self.ids.last() == Some(&Vocabulary::EOS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub groups: usize,
    pub beam_per_group: usize,
    pub lambda_div: f64,
    /// Upper bound on generated tokens, EOS included.
    pub max_len: usize,
    pub length_norm: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            groups: 4,
            beam_per_group: 2,
            lambda_div: 0.5,
            max_len: 60,
            length_norm: 0.6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] NnetError),
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.into()));
        if self.beam == 0 || self.groups == 0 || self.beam_per_group == 0 || self.max_len == 0 {
            return bad("beam, groups, beam_per_group and max_len must be positive");
        }
        if !(self.lambda_div >= 0.0) || !(self.length_norm >= 0.0) {
            return bad("lambda_div and length_norm must be non-negative");
        }
        Ok(())
    }

    pub fn validate_diverse(&self) -> Result<(), DecodeError> {
        self.validate()?;
        if self.beam != self.groups * self.beam_per_group {
            return Err(DecodeError::InvalidConfig(format!(
                "beam {} != groups {} × beam_per_group {}",
                self.beam, self.groups, self.beam_per_group
            )));
        }
        Ok(())
    }
}

/// logprob / len^alpha with len counting EOS.
pub fn normalized_score(logprob: f64, generated_len: usize, alpha: f64) -> f64 {
    logprob / (generated_len.max(1) as f64).powf(alpha)
}

#[inline]
fn generable(t: usize) -> bool {
    t != Vocabulary::PAD as usize && t != Vocabulary::BOS as usize
}

#[derive(Debug, Clone)]
struct Beam {
    ids: TokenIds,
    logprob: f64,
    /// Running selection score; equals `logprob` without diversity penalties.
    score: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    logprob: f64,
    beam: usize,
    token: usize,
}

fn by_score_then_index(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.beam.cmp(&b.beam))
        .then(a.token.cmp(&b.token))
}

/// One search group's state.
struct Group {
    width: usize,
    live: Vec<Beam>,
    finished: Vec<Beam>,
}

impl Group {
    fn new(width: usize) -> Self {
        Self {
            width,
            live: vec![Beam {
                ids: vec![Vocabulary::BOS],
                logprob: 0.0,
                score: 0.0,
            }],
            finished: Vec::new(),
        }
    }

    fn done(&self) -> bool {
        self.live.is_empty() || self.finished.len() >= self.width
    }

    /// Extend every live beam by one token; returns the tokens chosen.
    fn advance(
        &mut self,
        lps: &[Vec<f64>],
        penalty: &dyn Fn(usize) -> f64,
        max_len: usize,
    ) -> Vec<usize> {
        let mut cands = Vec::with_capacity(self.live.len() * lps.first().map_or(0, Vec::len));
        for (b, (beam, lp)) in self.live.iter().zip(lps).enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                if generable(t) && l.is_finite() {
                    cands.push(Candidate {
                        score: beam.score + l - penalty(t),
                        logprob: beam.logprob + l,
                        beam: b,
                        token: t,
                    });
                }
            }
        }
        cands.sort_by(by_score_then_index);
        cands.truncate(self.width);
        let mut next = Vec::with_capacity(cands.len());
        let mut chosen = Vec::with_capacity(cands.len());
        for c in cands {
            let mut ids = self.live[c.beam].ids.clone();
            ids.push(c.token as TokenId);
            chosen.push(c.token);
            let beam = Beam {
                ids,
                logprob: c.logprob,
                score: c.score,
            };
            if c.token == Vocabulary::EOS as usize || beam.ids.len() > max_len {
                self.finished.push(beam);
            } else {
                next.push(beam);
            }
        }
        self.live = next;
        chosen
    }

    fn results(mut self, alpha: f64, group: usize) -> Vec<Hypothesis> {
        let mut all = std::mem::take(&mut self.finished);
        all.append(&mut self.live);
        let key = |b: &Beam| normalized_score(b.score, b.ids.len() - 1, alpha);
        all.sort_by(|a, b| {
            key(b)
                .partial_cmp(&key(a))
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        all.truncate(self.width);
        all.into_iter()
            .map(|b| Hypothesis {
                ids: b.ids,
                logprob: b.logprob,
                group,
                score: None,
            })
            .collect()
    }
}

/// Length-normalized beam search. Returns at most `beam` hypotheses sorted by
/// normalized log-probability, best first.
pub fn beam_search<M: StepModel + ?Sized>(
    model: &M,
    src: &TokenIds,
    beam: usize,
    max_len: usize,
    length_norm: f64,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let cfg = DecodeConfig {
        beam,
        groups: 1,
        beam_per_group: beam,
        lambda_div: 0.0,
        max_len,
        length_norm,
    };
    diverse_beam_search(model, src, &cfg)
}

/// Diverse beam search with a Hamming penalty between groups. Group g pays
/// `lambda_div` per earlier-group selection of the same token at the same
/// step. Returns each group's hypotheses in group order.
pub fn diverse_beam_search<M: StepModel + ?Sized>(
    model: &M,
    src: &TokenIds,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let state = model.start(src)?;
    let mut groups: Vec<Group> = (0..cfg.groups)
        .map(|_| Group::new(cfg.beam_per_group))
        .collect();
    loop {
        if groups.iter().all(Group::done) {
            break;
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for g in groups.iter_mut() {
            if g.done() {
                continue;
            }
            let prefixes: Vec<&[TokenId]> = g.live.iter().map(|b| b.ids.as_slice()).collect();
            let lps = model.log_probs(&state, &prefixes);
            let lambda = cfg.lambda_div;
            let penalty = |t: usize| lambda * counts.get(&t).copied().unwrap_or(0) as f64;
            let chosen = g.advance(&lps, &penalty, cfg.max_len);
            for t in chosen {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .flat_map(|(i, g)| g.results(cfg.length_norm, i))
        .collect())
}

/// Drop exact-id duplicates, keeping the highest-logprob instance. Survivors
/// keep their relative input order.
pub fn dedup_candidates(hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    let mut best: HashMap<&TokenIds, usize> = HashMap::new();
    for (i, h) in hyps.iter().enumerate() {
        best.entry(&h.ids)
            .and_modify(|j| {
                if h.logprob > hyps[*j].logprob {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    let mut slots: Vec<Option<Hypothesis>> = hyps.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Batched greedy decoding over many sources; returns generated ids without
/// BOS or EOS.
pub fn greedy_decode_batch<T: Scalar>(
    model: &Seq2SeqModel<T>,
    srcs: &[TokenIds],
    max_len: usize,
) -> Vec<TokenIds> {
    let max_len = max_len.min(model.hyper.max_len);
    let mut prefixes: Vec<TokenIds> = vec![vec![Vocabulary::BOS]; srcs.len()];
    let mut done = vec![srcs.is_empty(); srcs.len()];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..srcs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let s: Vec<TokenIds> = active.iter().map(|&i| srcs[i].clone()).collect();
        let p: Vec<TokenIds> = active.iter().map(|&i| prefixes[i].clone()).collect();
        for (&i, lp) in active.iter().zip(model.next_log_probs_batch(&s, &p)) {
            let mut best = Vocabulary::EOS as usize;
            for (t, &v) in lp.iter().enumerate() {
                if generable(t) && v > lp[best] {
                    best = t;
                }
            }
            if best == Vocabulary::EOS as usize {
                done[i] = true;
            } else {
                prefixes[i].push(best as TokenId);
                if prefixes[i].len() > max_len {
                    done[i] = true;
                }
            }
        }
    }
    prefixes.into_iter().map(|p| p[1..].to_vec()).collect()
}

/// Generated content ids of a hypothesis: BOS and EOS removed.
pub fn content_ids(ids: &[TokenId]) -> &[TokenId] {
    let start = usize::from(ids.first() == Some(&Vocabulary::BOS));
    let end = if ids.last() == Some(&Vocabulary::EOS) && ids.len() > start {
        ids.len() - 1
    } else {
        ids.len()
    };
    &ids[start..end]
}
