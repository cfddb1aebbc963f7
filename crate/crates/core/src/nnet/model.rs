use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{batch_token_loss, log_softmax, TokenLoss};
use crate::scalar::Scalar;
use crate::textproc::{TokenId, TokenIds, Vocabulary};

use super::layers::{DecoderBlock, EncoderBlock, LayerNorm, Linear};
use super::params::{ParamId, Params, Tensor};
use super::tape::{Tape, Var};
use super::NnetError;

/// Architecture of the encoder–decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl ModelHyper {
    /// d_model 64, 4 heads, d_ff 128, 2+2 layers, max_len 64.
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 64,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NnetError::ShapeMismatch(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab <= Vocabulary::NUM_SPECIALS || self.tgt_vocab <= Vocabulary::NUM_SPECIALS
        {
            return Err(NnetError::ShapeMismatch(
                "vocabularies hold only specials".into(),
            ));
        }
        if self.max_len < 2 || self.d_ff == 0 {
            return Err(NnetError::ShapeMismatch(
                "max_len and d_ff must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Right-padded batch of id sequences.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
    /// `false` at padding positions.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let len = seqs
            .iter()
            .map(|s| s.as_ref().len())
            .max()
            .unwrap_or(0)
            .max(1);
        let batch = seqs.len();
        let mut ids = vec![Vocabulary::PAD; batch * len];
        let mut mask = vec![false; batch * len];
        let mut lengths = Vec::with_capacity(batch);
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            ids[b * len..b * len + s.len()].copy_from_slice(s);
            for m in &mut mask[b * len..b * len + s.len()] {
                *m = true;
            }
            lengths.push(s.len());
        }
        Self {
            ids,
            batch,
            len,
            mask,
            lengths,
        }
    }

    fn rows(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }
}

#[derive(Debug, Clone)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    output: Linear,
}

/// Source-side encoding reused across decoding steps.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    pub memory: Vec<T>,
    pub len: usize,
}

/// Transformer encoder–decoder translation model.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T> {
    pub hyper: ModelHyper,
    pub params: Params<T>,
    layout: Layout,
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new(hyper: ModelHyper, seed: u64) -> Result<Self, NnetError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = hyper.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let src_emb = p.add_uniform("src_embed", &[hyper.src_vocab, d], scale, &mut rng);
        let tgt_emb = p.add_uniform("tgt_embed", &[hyper.tgt_vocab, d], scale, &mut rng);
        let src_pos = p.add_uniform("src_pos", &[hyper.max_len, d], scale, &mut rng);
        let tgt_pos = p.add_uniform("tgt_pos", &[hyper.max_len, d], scale, &mut rng);
        let encoder = (0..hyper.enc_layers)
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
        let enc_norm = LayerNorm::new(&mut p, "enc.norm", d);
        let decoder = (0..hyper.dec_layers)
            .map(|i| {
                DecoderBlock::new(
                    &mut p,
                    &format!("dec.{i}"),
                    d,
                    hyper.heads,
                    hyper.d_ff,
                    &mut rng,
                )
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "dec.norm", d);
        let output = Linear::new(&mut p, "out_proj", d, hyper.tgt_vocab, &mut rng);
        Ok(Self {
            hyper,
            params: p,
            layout: Layout {
                src_emb,
                tgt_emb,
                src_pos,
                tgt_pos,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
                output,
            },
        })
    }

    /// Replace parameters with a set of identical names and shapes.
    pub fn with_params(hyper: ModelHyper, params: Params<T>) -> Result<Self, NnetError> {
        let mut model = Self::new(hyper, 0)?;
        if model.params.len() != params.len() {
            return Err(NnetError::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape != t2.shape {
                return Err(NnetError::CorruptCheckpoint(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape, t1.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn source_embedding(&self) -> &Tensor<T> {
        self.params.get(self.layout.src_emb)
    }

    pub fn target_embedding(&self) -> &Tensor<T> {
        self.params.get(self.layout.tgt_emb)
    }

    fn check_ids(&self, seqs: &[TokenIds], vocab: usize, side: &str) -> Result<(), NnetError> {
        for s in seqs {
            if s.len() > self.hyper.max_len {
                return Err(NnetError::ShapeMismatch(format!(
                    "{side} length {} exceeds max_len {}",
                    s.len(),
                    self.hyper.max_len
                )));
            }
            if let Some(&id) = s.iter().find(|&&i| i as usize >= vocab) {
                return Err(NnetError::IdOutOfRange { id, vocab });
            }
        }
        Ok(())
    }

    /// Encoder output `[batch·len, d_model]`.
    pub fn encode(&self, tape: &mut Tape<T>, pv: &[Var], src: &PaddedBatch) -> Var {
        let l = &self.layout;
        let tok = tape.gather(pv[l.src_emb.0], &src.rows());
        let pos = tape.gather(pv[l.src_pos.0], &src.positions());
        let mut x = tape.add(tok, pos);
        for block in &l.encoder {
            x = block.forward(tape, pv, x, src.batch, src.len, &src.mask);
        }
        l.enc_norm.forward(tape, pv, x)
    }

    /// Decoder hidden states `[batch·tgt_len, d_model]`.
    pub fn decode_hidden(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        memory: Var,
        src_len: usize,
        src_mask: &[bool],
        tgt_in: &PaddedBatch,
    ) -> Var {
        let l = &self.layout;
        let tok = tape.gather(pv[l.tgt_emb.0], &tgt_in.rows());
        let pos = tape.gather(pv[l.tgt_pos.0], &tgt_in.positions());
        let mut x = tape.add(tok, pos);
        for block in &l.decoder {
            x = block.forward(
                tape,
                pv,
                x,
                memory,
                tgt_in.batch,
                tgt_in.len,
                &tgt_in.mask,
                src_len,
                src_mask,
            );
        }
        l.dec_norm.forward(tape, pv, x)
    }

    pub fn project(&self, tape: &mut Tape<T>, pv: &[Var], hidden: Var) -> Var {
        self.layout.output.forward(tape, pv, hidden)
    }

    fn logits_var(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        src: &PaddedBatch,
        tgt_in: &PaddedBatch,
    ) -> Var {
        let mem = self.encode(tape, pv, src);
        let h = self.decode_hidden(tape, pv, mem, src.len, &src.mask, tgt_in);
        self.project(tape, pv, h)
    }

    /// Logits `[batch, tgt_len, |V_tgt|]`.
    pub fn forward(&self, src: &[TokenIds], tgt_in: &[TokenIds]) -> Result<Tensor<T>, NnetError> {
        if src.len() != tgt_in.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "{} sources for {} targets",
                src.len(),
                tgt_in.len()
            )));
        }
        self.check_ids(src, self.hyper.src_vocab, "source")?;
        self.check_ids(tgt_in, self.hyper.tgt_vocab, "target")?;
        let sb = PaddedBatch::new(src);
        let tb = PaddedBatch::new(tgt_in);
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let logits = self.logits_var(&mut tape, &pv, &sb, &tb);
        Ok(Tensor::from_vec(
            &[tb.batch, tb.len, self.hyper.tgt_vocab],
            tape.value(logits).to_vec(),
        ))
    }

    /// Teacher-forcing inputs and targets for (src, tgt) pairs where tgt is
    /// BOS … EOS. PAD targets are excluded.
    fn teacher_forcing(
        pairs: &[(TokenIds, TokenIds)],
    ) -> (Vec<TokenIds>, Vec<TokenIds>, Vec<TokenIds>) {
        let src: Vec<TokenIds> = pairs.iter().map(|(s, _)| s.clone()).collect();
        let tin: Vec<TokenIds> = pairs
            .iter()
            .map(|(_, t)| t[..t.len().saturating_sub(1).max(1)].to_vec())
            .collect();
        let tout: Vec<TokenIds> = pairs
            .iter()
            .map(|(_, t)| {
                if t.len() > 1 {
                    t[1..].to_vec()
                } else {
                    Vec::new()
                }
            })
            .collect();
        (src, tin, tout)
    }

    fn targets(tout: &[TokenIds], len: usize) -> Vec<Option<usize>> {
        let mut targets = Vec::with_capacity(tout.len() * len);
        for t in tout {
            for i in 0..len {
                targets.push(match t.get(i) {
                    Some(&id) if id != Vocabulary::PAD => Some(id as usize),
                    _ => None,
                });
            }
        }
        targets
    }

    /// Mean token loss over a batch and the gradient of every parameter.
    pub fn loss_and_grads<L: TokenLoss<T> + ?Sized>(
        &self,
        pairs: &[(TokenIds, TokenIds)],
        loss: &L,
    ) -> Result<(T, Vec<Option<Vec<T>>>), NnetError> {
        let (src, tin, tout) = Self::teacher_forcing(pairs);
        self.check_ids(&src, self.hyper.src_vocab, "source")?;
        self.check_ids(&tin, self.hyper.tgt_vocab, "target")?;
        self.check_ids(&tout, self.hyper.tgt_vocab, "target")?;
        let sb = PaddedBatch::new(&src);
        let tb = PaddedBatch::new(&tin);
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let logits = self.logits_var(&mut tape, &pv, &sb, &tb);
        let targets = Self::targets(&tout, tb.len);
        let (value, grad) =
            batch_token_loss(loss, tape.value(logits), self.hyper.tgt_vocab, &targets);
        let out = tape.scalar_fn(value, vec![logits], vec![grad]);
        let grads = tape.backward(out, self.params.len());
        Ok((value, grads))
    }

    /// Mean token loss without gradients.
    pub fn loss<L: TokenLoss<T> + ?Sized>(
        &self,
        pairs: &[(TokenIds, TokenIds)],
        loss: &L,
    ) -> Result<T, NnetError> {
        let (src, tin, tout) = Self::teacher_forcing(pairs);
        let logits = self.forward(&src, &tin)?;
        let len = logits.shape[1];
        let targets = Self::targets(&tout, len);
        Ok(batch_token_loss(loss, &logits.data, self.hyper.tgt_vocab, &targets).0)
    }

    /// Σ_t log p(tgt_t | tgt_<t, src) for a BOS … EOS target, PAD excluded.
    pub fn log_likelihood(&self, src: &TokenIds, tgt: &TokenIds) -> Result<T, NnetError> {
        if tgt.len() < 2 {
            return Ok(T::zero());
        }
        let logits = self.forward(&[src.clone()], &[tgt[..tgt.len() - 1].to_vec()])?;
        let v = self.hyper.tgt_vocab;
        let mut total = T::zero();
        for (t, &y) in tgt[1..].iter().enumerate() {
            if y == Vocabulary::PAD {
                continue;
            }
            let lp = log_softmax(&logits.data[t * v..(t + 1) * v]);
            total += lp[y as usize];
        }
        Ok(total)
    }

    pub fn encode_source(&self, src: &TokenIds) -> Result<EncodedSource<T>, NnetError> {
        self.check_ids(std::slice::from_ref(src), self.hyper.src_vocab, "source")?;
        let sb = PaddedBatch::new(std::slice::from_ref(src));
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let mem = self.encode(&mut tape, &pv, &sb);
        Ok(EncodedSource {
            memory: tape.value(mem).to_vec(),
            len: sb.len,
        })
    }

    /// Next-token log-probabilities after each prefix, all conditioned on the
    /// same encoded source.
    pub fn next_log_probs(&self, enc: &EncodedSource<T>, prefixes: &[&[TokenId]]) -> Vec<Vec<T>> {
        if prefixes.is_empty() {
            return Vec::new();
        }
        let d = self.hyper.d_model;
        let b = prefixes.len();
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let mut mem = Vec::with_capacity(b * enc.memory.len());
        for _ in 0..b {
            mem.extend_from_slice(&enc.memory);
        }
        let mem = tape.constant(mem, b * enc.len, d);
        let src_mask = vec![true; b * enc.len];
        let tb = PaddedBatch::new(prefixes);
        let h = self.decode_hidden(&mut tape, &pv, mem, enc.len, &src_mask, &tb);
        let last: Vec<usize> = tb
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| i * tb.len + l.max(1) - 1)
            .collect();
        let h = tape.gather(h, &last);
        let logits = self.project(&mut tape, &pv, h);
        let v = self.hyper.tgt_vocab;
        tape.value(logits).chunks(v).map(log_softmax).collect()
    }

    /// Next-token log-probabilities for a batch of different sources.
    pub fn next_log_probs_batch(&self, srcs: &[TokenIds], prefixes: &[TokenIds]) -> Vec<Vec<T>> {
        let sb = PaddedBatch::new(srcs);
        let tb = PaddedBatch::new(prefixes);
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let mem = self.encode(&mut tape, &pv, &sb);
        let h = self.decode_hidden(&mut tape, &pv, mem, sb.len, &sb.mask, &tb);
        let last: Vec<usize> = tb
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| i * tb.len + l.max(1) - 1)
            .collect();
        let h = tape.gather(h, &last);
        let logits = self.project(&mut tape, &pv, h);
        let v = self.hyper.tgt_vocab;
        tape.value(logits).chunks(v).map(log_softmax).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            hyper: self.hyper.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}
