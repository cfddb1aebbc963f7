//! Contrastive re-ranking: a bilingual encoder over (source, candidate)
//! pairs trained with single-positive InfoNCE against diverse-beam
//! negatives. A candidate's confidence is the cosine between
//! `embed(src, src)` and `embed(src, cand)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{
    content_ids, dedup_candidates, diverse_beam_search, DecodeConfig, DecodeError, Hypothesis,
};
use crate::nnet::checkpoint;
use crate::nnet::layers::{EncoderBlock, LayerNorm, Linear};
use crate::nnet::train::{clip_grads, AdamW, LrSchedule};
use crate::nnet::{
    relative_error, sample_coordinates, Checkpoint, CheckpointKind, NnetError, Params,
    Seq2SeqModel, Tape, Tensor, Var,
};
use crate::scalar::Scalar;
use crate::textproc::{TokenId, TokenIds, Vocabulary};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("zero-norm representation")]
    ZeroVector,
    #[error("no training pairs")]
    EmptyCorpus,
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("invalid reranker config: {0}")]
    InvalidConfig(String),
    #[error("non-finite contrastive loss at batch {batch_index}")]
    NonFiniteLoss { batch_index: usize },
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Encoder architecture. `max_len` bounds each segment separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankHyper {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
    pub d_proj: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl RerankHyper {
    /// Same width as the translator so its embeddings can seed the encoder.
    pub fn from_translator<T>(m: &Seq2SeqModel<T>) -> Self {
        let h = &m.hyper;
        Self {
            d_model: h.d_model,
            heads: h.heads,
            d_ff: h.d_ff,
            layers: 2,
            max_len: h.max_len,
            d_proj: h.d_model,
            src_vocab: h.src_vocab,
            tgt_vocab: h.tgt_vocab,
        }
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(RerankError::InvalidConfig(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_proj == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(RerankError::InvalidConfig(
                "d_proj, d_ff and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per positive in each training example.
    pub negatives: usize,
    /// Negatives mined per source; each visit samples `negatives` of them.
    pub negative_pool: usize,
    pub tau: f64,
    pub body_lr: f64,
    pub head_lr: f64,
    /// Both learning rates decay on a cosine to this floor.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub layers: usize,
    pub seed: u64,
    pub decode: DecodeConfig,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            negatives: 4,
            negative_pool: 7,
            tau: 0.1,
            body_lr: 1e-5,
            head_lr: 2e-4,
            lr_floor: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            layers: 2,
            seed: 17,
            decode: DecodeConfig::default(),
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        let bad = |m: String| Err(RerankError::InvalidConfig(m));
        if self.batch_size == 0 || self.negatives == 0 || self.layers == 0 {
            return bad("batch_size, negatives and layers must be positive".into());
        }
        if self.negative_pool < self.negatives {
            return bad(format!(
                "negative_pool {} < negatives {}",
                self.negative_pool, self.negatives
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.body_lr >= 0.0 && self.head_lr >= 0.0 && self.lr_floor >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        self.decode.validate_diverse()?;
        Ok(())
    }
}

/// Which vocabulary a segment's ids come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    seg: usize,
    pos: usize,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head_in: Linear,
    head_out: Linear,
}

/// One encoder input: the source segment and a second segment from either
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairInput {
    pub src: TokenIds,
    pub second: TokenIds,
    pub side: Side,
}

impl PairInput {
    pub fn candidate(src: &[TokenId], cand: &[TokenId]) -> Self {
        Self {
            src: content_ids(src).to_vec(),
            second: content_ids(cand).to_vec(),
            side: Side::Target,
        }
    }

    pub fn anchor(src: &[TokenId]) -> Self {
        let s = content_ids(src).to_vec();
        Self {
            src: s.clone(),
            second: s,
            side: Side::Source,
        }
    }
}

/// Bilingual scoring encoder: token, segment and position embeddings, a
/// Pre-LN transformer stack, mean pooling over real tokens, and a
/// Linear → tanh → Linear projection head.
#[derive(Debug, Clone)]
pub struct RerankEncoder<T> {
    pub hyper: RerankHyper,
    pub params: Params<T>,
    layout: Layout,
}

impl<T: Scalar> RerankEncoder<T> {
    /// Random encoder. Token rows cover the source vocabulary followed by the
    /// target vocabulary.
    pub fn new(hyper: RerankHyper, seed: u64) -> Result<Self, RerankError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = hyper.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let tok = p
            .add_uniform(
                "tok_embed",
                &[hyper.src_vocab + hyper.tgt_vocab, d],
                scale,
                &mut rng,
            )
            .0;
        let seg = p.add_uniform("seg_embed", &[2, d], scale, &mut rng).0;
        let pos = p
            .add_uniform("pos_embed", &[hyper.max_len, d], scale, &mut rng)
            .0;
        let blocks = (0..hyper.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut p,
                    &format!("enc.{i}"),
                    d,
                    hyper.heads,
                    hyper.d_ff,
                    &mut rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut p, "enc.norm", d);
        let head_in = Linear::new(&mut p, "head.0", d, d, &mut rng);
        let head_out = Linear::new(&mut p, "head.1", d, hyper.d_proj, &mut rng);
        Ok(Self {
            hyper,
            params: p,
            layout: Layout {
                tok,
                seg,
                pos,
                blocks,
                norm,
                head_in,
                head_out,
            },
        })
    }

    /// Random encoder whose token rows are copied from the translator's
    /// source and target embeddings.
    pub fn from_translator<U: Scalar>(
        model: &Seq2SeqModel<U>,
        layers: usize,
        seed: u64,
    ) -> Result<Self, RerankError> {
        let hyper = RerankHyper {
            layers,
            ..RerankHyper::from_translator(model)
        };
        let mut enc = Self::new(hyper, seed)?;
        let rows: Vec<T> = model
            .source_embedding()
            .data
            .iter()
            .chain(&model.target_embedding().data)
            .map(|x| T::of(x.f64()))
            .collect();
        let tok = &mut enc.params.tensors_mut()[enc.layout.tok];
        debug_assert_eq!(tok.data.len(), rows.len());
        tok.data = rows;
        Ok(enc)
    }

    pub fn with_params(hyper: RerankHyper, params: Params<T>) -> Result<Self, RerankError> {
        let mut enc = Self::new(hyper, 0)?;
        if enc.params.len() != params.len()
            || enc
                .params
                .iter()
                .zip(params.iter())
                .any(|((n1, t1), (n2, t2))| n1 != n2 || t1.shape != t2.shape)
        {
            return Err(
                NnetError::CorruptCheckpoint("reranker parameter layout mismatch".into()).into(),
            );
        }
        enc.params = params;
        Ok(enc)
    }

    /// Parameters of the projection head (the fast learning-rate group).
    pub fn is_head_param(&self, index: usize) -> bool {
        self.params.names()[index].starts_with("head.")
    }

    fn check(&self, item: &PairInput) -> Result<(), RerankError> {
        let h = &self.hyper;
        for (ids, vocab) in [
            (&item.src, h.src_vocab),
            (
                &item.second,
                if item.side == Side::Source {
                    h.src_vocab
                } else {
                    h.tgt_vocab
                },
            ),
        ] {
            if ids.len() + 1 > h.max_len {
                return Err(NnetError::ShapeMismatch(format!(
                    "segment of {} tokens exceeds max_len {}",
                    ids.len(),
                    h.max_len
                ))
                .into());
            }
            if let Some(&id) = ids.iter().find(|&&i| i as usize >= vocab) {
                return Err(NnetError::IdOutOfRange { id, vocab }.into());
            }
        }
        Ok(())
    }

    /// Projection outputs `[items, d_proj]`. Each segment is prefixed with
    /// BOS so it is never empty; positions restart per segment.
    pub fn embed_var(&self, tape: &mut Tape<T>, pv: &[Var], items: &[PairInput]) -> Var {
        let offset = self.hyper.src_vocab;
        let seqs: Vec<Vec<(usize, usize, usize)>> = items
            .iter()
            .map(|it| {
                let mut s = Vec::with_capacity(it.src.len() + it.second.len() + 2);
                for (p, &id) in std::iter::once(&Vocabulary::BOS).chain(&it.src).enumerate() {
                    s.push((id as usize, 0, p));
                }
                let shift = if it.side == Side::Target { offset } else { 0 };
                for (p, &id) in std::iter::once(&Vocabulary::BOS)
                    .chain(&it.second)
                    .enumerate()
                {
                    s.push((id as usize + shift, 1, p));
                }
                s
            })
            .collect();
        let len = seqs.iter().map(Vec::len).max().unwrap_or(1);
        let batch = items.len();
        let mut toks = vec![Vocabulary::PAD as usize; batch * len];
        let mut segs = vec![0usize; batch * len];
        let mut poss = vec![0usize; batch * len];
        let mut mask = vec![false; batch * len];
        let mut groups = Vec::with_capacity(batch);
        for (b, s) in seqs.iter().enumerate() {
            for (i, &(t, g, p)) in s.iter().enumerate() {
                toks[b * len + i] = t;
                segs[b * len + i] = g;
                poss[b * len + i] = p;
                mask[b * len + i] = true;
            }
            groups.push((b * len..b * len + s.len()).collect());
        }
        let l = &self.layout;
        let t = tape.gather(pv[l.tok], &toks);
        let g = tape.gather(pv[l.seg], &segs);
        let p = tape.gather(pv[l.pos], &poss);
        let x = tape.add(t, g);
        let mut x = tape.add(x, p);
        for block in &l.blocks {
            x = block.forward(tape, pv, x, batch, len, &mask);
        }
        let x = l.norm.forward(tape, pv, x);
        let pooled = tape.mean_pool(x, groups);
        let h = l.head_in.forward(tape, pv, pooled);
        let h = tape.tanh(h);
        l.head_out.forward(tape, pv, h)
    }

    /// Representation of each input, one vector of length `d_proj` apiece.
    pub fn embed_many(&self, items: &[PairInput]) -> Result<Vec<Vec<T>>, RerankError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        for it in items {
            self.check(it)?;
        }
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let out = self.embed_var(&mut tape, &pv, items);
        Ok(tape
            .value(out)
            .chunks(self.hyper.d_proj)
            .map(<[T]>::to_vec)
            .collect())
    }

    /// h for a (source, candidate) pair; ids may carry BOS/EOS.
    pub fn embed(&self, src: &[TokenId], cand: &[TokenId]) -> Result<Vec<T>, RerankError> {
        Ok(self
            .embed_many(&[PairInput::candidate(src, cand)])?
            .remove(0))
    }

    /// Anchor h_x = embed(src, src).
    pub fn embed_anchor(&self, src: &[TokenId]) -> Result<Vec<T>, RerankError> {
        Ok(self.embed_many(&[PairInput::anchor(src)])?.remove(0))
    }

    pub fn cast<U: Scalar>(&self) -> RerankEncoder<U> {
        RerankEncoder {
            hyper: self.hyper.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}

/// One positive, its negatives and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub h_x: Vec<T>,
    pub h_pos: Vec<T>,
    pub h_negs: Vec<Vec<T>>,
    pub tau: f64,
}

/// Loss value with its gradient for every vector role.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads<T> {
    pub value: T,
    pub d_x: Vec<T>,
    pub d_pos: Vec<T>,
    pub d_negs: Vec<Vec<T>>,
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// cos(u, v) with its gradients with respect to u and v.
fn cosine_with_grads<T: Scalar>(u: &[T], v: &[T]) -> Result<(T, Vec<T>, Vec<T>), RerankError> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == T::zero() || nv == T::zero() {
        return Err(RerankError::ZeroVector);
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let s = dot / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - s * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - s * b / (nv * nv))
        .collect();
    Ok((s, du, dv))
}

/// −log softmax_0 over [sim(h_x, h_pos), sim(h_x, h_neg_1), …] / τ with the
/// positive counted once.
pub fn contrastive_loss_and_grads<T: Scalar>(
    b: &ContrastiveBatch<T>,
) -> Result<ContrastiveGrads<T>, RerankError> {
    if !(b.tau > 0.0) {
        return Err(RerankError::InvalidConfig(format!(
            "tau must be positive, got {}",
            b.tau
        )));
    }
    let tau = T::of(b.tau);
    let mut sims = Vec::with_capacity(1 + b.h_negs.len());
    let mut parts = Vec::with_capacity(1 + b.h_negs.len());
    for v in std::iter::once(&b.h_pos).chain(&b.h_negs) {
        let (s, dx, dv) = cosine_with_grads(&b.h_x, v)?;
        sims.push(s / tau);
        parts.push((dx, dv));
    }
    let m = sims.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = sims.iter().map(|&s| (s - m).exp()).sum();
    let value = m + z.ln() - sims[0];
    let mut d_x = vec![T::zero(); b.h_x.len()];
    let mut dvs = Vec::with_capacity(sims.len());
    for (k, (s, (dx, dv))) in sims.iter().zip(parts).enumerate() {
        let w = ((*s - m).exp() / z - if k == 0 { T::one() } else { T::zero() }) / tau;
        for (acc, g) in d_x.iter_mut().zip(&dx) {
            *acc += w * *g;
        }
        dvs.push(dv.into_iter().map(|g| w * g).collect::<Vec<T>>());
    }
    let d_pos = dvs.remove(0);
    Ok(ContrastiveGrads {
        value: value.max(T::zero()),
        d_x,
        d_pos,
        d_negs: dvs,
    })
}

pub fn contrastive_loss<T: Scalar>(b: &ContrastiveBatch<T>) -> Result<T, RerankError> {
    Ok(contrastive_loss_and_grads(b)?.value)
}

/// A training example: source, reference and its pool of negatives, all as
/// content ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub src: TokenIds,
    pub pos: TokenIds,
    pub negs: Vec<TokenIds>,
}

impl Triple {
    /// The same example restricted to the first `n` negatives.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            src: self.src.clone(),
            pos: self.pos.clone(),
            negs: self.negs.iter().take(n).cloned().collect(),
        }
    }

    fn sampled<R: Rng>(&self, n: usize, rng: &mut R) -> Self {
        Self {
            src: self.src.clone(),
            pos: self.pos.clone(),
            negs: self.negs.choose_multiple(rng, n).cloned().collect(),
        }
    }

    fn inputs(&self) -> Vec<PairInput> {
        let mut v = vec![
            PairInput::anchor(&self.src),
            PairInput::candidate(&self.src, &self.pos),
        ];
        v.extend(self.negs.iter().map(|n| PairInput::candidate(&self.src, n)));
        v
    }
}

/// A copy of `reference` with one token replaced, inserted or deleted.
fn corrupt<R: Rng>(reference: &[TokenId], vocab: usize, rng: &mut R) -> TokenIds {
    let lo = Vocabulary::NUM_SPECIALS as TokenId;
    let hi = vocab as TokenId;
    let mut out = reference.to_vec();
    match rng.gen_range(0..3) {
        0 if !out.is_empty() => {
            let i = rng.gen_range(0..out.len());
            if hi > lo + 1 {
                let old = out[i];
                while out[i] == old {
                    out[i] = rng.gen_range(lo..hi);
                }
            } else {
                out.push(lo);
            }
        }
        1 if out.len() > 1 => {
            out.remove(rng.gen_range(0..out.len()));
        }
        _ => {
            let i = rng.gen_range(0..=out.len());
            out.insert(i, rng.gen_range(lo..hi));
        }
    }
    out
}

/// Up to `n` distinct decoder outputs different from `reference`, in
/// decoder rank order, padded with distinct corrupted copies of the
/// reference. Ids are content only.
pub fn mine_negatives<U: Scalar>(
    model: &Seq2SeqModel<U>,
    src: &TokenIds,
    reference: &[TokenId],
    cfg: &DecodeConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<TokenIds>, RerankError> {
    let reference = content_ids(reference);
    let hyps = dedup_candidates(diverse_beam_search(model, src, cfg)?);
    let mut out: Vec<TokenIds> = Vec::with_capacity(n);
    for h in &hyps {
        let c = content_ids(&h.ids);
        if c != reference && !out.iter().any(|o| o.as_slice() == c) {
            out.push(c.to_vec());
        }
        if out.len() == n {
            return Ok(out);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_content = model.hyper.max_len - 1;
    let mut attempts = 0;
    while out.len() < n {
        let c = corrupt(reference, model.hyper.tgt_vocab, &mut rng);
        attempts += 1;
        if c != reference && c.len() <= max_content && !out.contains(&c) || attempts > 1000 {
            out.push(c);
        }
    }
    Ok(out)
}

/// Mine negatives for every (src, ref) pair. Sources carry BOS/EOS as the
/// translator expects.
pub fn build_triples<U: Scalar>(
    model: &Seq2SeqModel<U>,
    pairs: &[(TokenIds, TokenIds)],
    cfg: &RerankConfig,
) -> Result<Vec<Triple>, RerankError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (s, r))| {
            let negs = mine_negatives(
                model,
                s,
                r,
                &cfg.decode,
                cfg.negative_pool,
                cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9),
            )?;
            Ok(Triple {
                src: content_ids(s).to_vec(),
                pos: content_ids(r).to_vec(),
                negs,
            })
        })
        .collect()
}

/// Mean contrastive loss of a batch and its gradient with respect to every
/// encoder parameter.
pub fn batch_loss_and_grads<T: Scalar>(
    enc: &RerankEncoder<T>,
    triples: &[Triple],
    tau: f64,
) -> Result<(T, Vec<Option<Vec<T>>>), RerankError> {
    let inputs: Vec<PairInput> = triples.iter().flat_map(Triple::inputs).collect();
    for it in &inputs {
        enc.check(it)?;
    }
    let mut tape = Tape::new();
    let pv = enc.params.bind(&mut tape);
    let out = enc.embed_var(&mut tape, &pv, &inputs);
    let d = enc.hyper.d_proj;
    let vals = tape.value(out).to_vec();
    let mut grad = vec![T::zero(); vals.len()];
    let mut total = T::zero();
    let inv = T::one() / T::of(triples.len().max(1) as f64);
    let mut row = 0;
    for t in triples {
        let k = 2 + t.negs.len();
        let rows: Vec<&[T]> = (row..row + k).map(|r| &vals[r * d..(r + 1) * d]).collect();
        let b = ContrastiveBatch {
            h_x: rows[0].to_vec(),
            h_pos: rows[1].to_vec(),
            h_negs: rows[2..].iter().map(|r| r.to_vec()).collect(),
            tau,
        };
        let g = contrastive_loss_and_grads(&b)?;
        total += g.value;
        for (j, gv) in std::iter::once(&g.d_x)
            .chain(std::iter::once(&g.d_pos))
            .chain(&g.d_negs)
            .enumerate()
        {
            for (dst, &x) in grad[(row + j) * d..(row + j + 1) * d].iter_mut().zip(gv) {
                *dst = x * inv;
            }
        }
        row += k;
    }
    let value = total * inv;
    let s = tape.scalar_fn(value, vec![out], vec![grad]);
    Ok((value, tape.backward(s, enc.params.len())))
}

/// Mean contrastive loss over triples without gradients.
pub fn mean_contrastive_loss<T: Scalar>(
    enc: &RerankEncoder<T>,
    triples: &[Triple],
    tau: f64,
) -> Result<f64, RerankError> {
    if triples.is_empty() {
        return Err(RerankError::EmptyCorpus);
    }
    let mut total = 0.0;
    for chunk in triples.chunks(32) {
        let inputs: Vec<PairInput> = chunk.iter().flat_map(Triple::inputs).collect();
        let h = enc.embed_many(&inputs)?;
        let mut row = 0;
        for t in chunk {
            let k = 2 + t.negs.len();
            let b = ContrastiveBatch {
                h_x: h[row].clone(),
                h_pos: h[row + 1].clone(),
                h_negs: h[row + 2..row + k].to_vec(),
                tau,
            };
            total += contrastive_loss(&b)?.f64();
            row += k;
        }
    }
    Ok(total / triples.len() as f64)
}

/// Largest relative error between analytic encoder gradients and central
/// differences over up to `samples` parameters.
pub fn grad_check(
    enc: &RerankEncoder<f64>,
    triples: &[Triple],
    tau: f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, RerankError> {
    let (_, grads) = batch_loss_and_grads(enc, triples, tau)?;
    let sizes: Vec<usize> = enc.params.tensors().iter().map(Tensor::len).collect();
    let mut probe = enc.clone();
    let mut worst = 0.0f64;
    for (i, j) in sample_coordinates(&grads, &sizes, samples, seed) {
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
        let orig = probe.params.tensors()[i].data[j];
        probe.params.tensors_mut()[i].data[j] = orig + eps;
        let up = batch_loss_and_grads(&probe, triples, tau)?.0;
        probe.params.tensors_mut()[i].data[j] = orig - eps;
        let down = batch_loss_and_grads(&probe, triples, tau)?.0;
        probe.params.tensors_mut()[i].data[j] = orig;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Train on pre-mined triples. The body and the projection head follow
/// separate cosine schedules from their initial rates to `lr_floor`.
pub fn train_on_triples<T: Scalar>(
    enc: &mut RerankEncoder<T>,
    triples: &[Triple],
    cfg: &RerankConfig,
) -> Result<RerankReport, RerankError> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(RerankError::EmptyCorpus);
    }
    let per_epoch = triples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let sched = |lr: f64| LrSchedule {
        lr_init: lr,
        lr_min: cfg.lr_floor.min(lr),
        warmup_steps: 0,
        total_steps: total,
    };
    let (body, head) = (sched(cfg.body_lr), sched(cfg.head_lr));
    let is_head: Vec<bool> = (0..enc.params.len())
        .map(|i| enc.is_head_param(i))
        .collect();
    let mut opt: AdamW<T> = AdamW::new(&enc.params, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = RerankReport::default();
    let mut order: Vec<usize> = (0..triples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Triple> = chunk
                .iter()
                .map(|&i| triples[i].sampled(cfg.negatives, &mut rng))
                .collect();
            let (value, mut grads) = batch_loss_and_grads(enc, &batch, cfg.tau)?;
            if !value.is_finite()
                || grads
                    .iter()
                    .flatten()
                    .any(|g| g.iter().any(|x| !x.is_finite()))
            {
                return Err(RerankError::NonFiniteLoss {
                    batch_index: report.steps,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grads(&mut grads, c);
            }
            let (lb, lh) = (body.lr_at(report.steps), head.lr_at(report.steps));
            opt.step(
                &mut enc.params,
                &grads,
                |i| if is_head[i] { lh } else { lb },
            );
            report.steps += 1;
            sum += value.f64();
        }
        report.epoch_losses.push(sum / per_epoch as f64);
    }
    Ok(report)
}

/// Build an encoder from the translator, mine negatives on `pairs` and
/// train it.
pub fn train_reranker<T: Scalar, U: Scalar>(
    pairs: &[(TokenIds, TokenIds)],
    translator: &Seq2SeqModel<U>,
    cfg: &RerankConfig,
) -> Result<(RerankEncoder<T>, RerankReport), RerankError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RerankError::EmptyCorpus);
    }
    let triples = build_triples(translator, pairs, cfg)?;
    let mut enc = RerankEncoder::from_translator(translator, cfg.layers, cfg.seed)?;
    let report = train_on_triples(&mut enc, &triples, cfg)?;
    Ok((enc, report))
}

/// Score each candidate by cos(embed(src, src), embed(src, cand)) and sort
/// by score descending; ties keep the input order.
pub fn rerank<T: Scalar>(
    enc: &RerankEncoder<T>,
    src: &[TokenId],
    candidates: Vec<Hypothesis>,
) -> Result<Vec<Hypothesis>, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::EmptyCandidates);
    }
    let mut inputs = vec![PairInput::anchor(src)];
    inputs.extend(candidates.iter().map(|h| PairInput::candidate(src, &h.ids)));
    let h = enc.embed_many(&inputs)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (mut hyp, v) in candidates.into_iter().zip(&h[1..]) {
        let (s, _, _) = cosine_with_grads(&h[0], v)?;
        hyp.score = Some(s.f64());
        scored.push(hyp);
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(scored)
}

pub fn save_reranker<T: Scalar>(
    enc: &RerankEncoder<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<(), RerankError> {
    let ck = Checkpoint {
        kind: CheckpointKind::Reranker,
        hyper_json: serde_json::to_string(&enc.hyper).expect("hyper serializes"),
        vocab_hashes: vec![src_vocab.content_hash(), tgt_vocab.content_hash()],
        params: enc.params.clone(),
    };
    let path = path.as_ref();
    checkpoint::save(&ck, path)?;
    let (sp, tp) = crate::nnet::vocab_paths(path);
    src_vocab.save(sp).map_err(NnetError::from)?;
    tgt_vocab.save(tp).map_err(NnetError::from)?;
    Ok(())
}

/// Load an encoder together with the vocabularies stored beside it.
pub fn load_reranker_with_vocabs<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(RerankEncoder<T>, Vocabulary, Vocabulary), RerankError> {
    let path = path.as_ref();
    let (sp, tp) = crate::nnet::vocab_paths(path);
    let corrupt = |e: crate::textproc::TextError| {
        RerankError::Model(NnetError::CorruptCheckpoint(e.to_string()))
    };
    let src = Vocabulary::load(sp).map_err(corrupt)?;
    let tgt = Vocabulary::load(tp).map_err(corrupt)?;
    let enc = load_reranker(path, &src, &tgt)?;
    Ok((enc, src, tgt))
}

pub fn load_reranker<T: Scalar>(
    path: impl AsRef<Path>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<RerankEncoder<T>, RerankError> {
    let ck: Checkpoint<T> = checkpoint::load(path)?;
    let corrupt = |m: &str| RerankError::Model(NnetError::CorruptCheckpoint(m.into()));
    if ck.kind != CheckpointKind::Reranker {
        return Err(corrupt("not a reranker checkpoint"));
    }
    if ck.vocab_hashes != [src_vocab.content_hash(), tgt_vocab.content_hash()] {
        return Err(corrupt("vocabulary hash mismatch"));
    }
    let hyper: RerankHyper =
        serde_json::from_str(&ck.hyper_json).map_err(|_| corrupt("hyper block"))?;
    RerankEncoder::with_params(hyper, ck.params)
}
