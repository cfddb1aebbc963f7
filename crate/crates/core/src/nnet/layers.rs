//! Pre-norm transformer building blocks shared by the translator and the
//! re-ranking encoder.

use rand::Rng;

use crate::scalar::Scalar;

use super::params::{ParamId, Params};
use super::tape::{AttnSpec, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = params.add_uniform(format!("{name}.weight"), &[d_in, d_out], scale, rng);
        let b = params.add_const(format!("{name}.bias"), &[d_out], 0.0);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, pv[self.w.0]);
        tape.add_bias(h, pv[self.b.0])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut Params<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: params.add_const(format!("{name}.gamma"), &[d], 1.0),
            beta: params.add_const(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> Var {
        tape.layer_norm(x, pv[self.gamma.0], pv[self.beta.0])
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(params, &format!("{name}.q"), d, d, rng),
            k: Linear::new(params, &format!("{name}.k"), d, d, rng),
            v: Linear::new(params, &format!("{name}.v"), d, d, rng),
            o: Linear::new(params, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `x` provides queries, `mem` keys and values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        x: Var,
        mem: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        key_mask: &[bool],
        causal: bool,
    ) -> Var {
        let q = self.q.forward(tape, pv, x);
        let k = self.k.forward(tape, pv, mem);
        let v = self.v.forward(tape, pv, mem);
        let spec = AttnSpec {
            batch,
            q_len,
            k_len,
            heads: self.heads,
            key_mask: key_mask.to_vec(),
            causal,
        };
        let a = tape.attention(q, k, v, spec);
        self.o.forward(tape, pv, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(params, &format!("{name}.fc1"), d, d_ff, rng),
            l2: Linear::new(params, &format!("{name}.fc2"), d_ff, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> Var {
        let h = self.l1.forward(tape, pv, x);
        let h = tape.gelu(h);
        self.l2.forward(tape, pv, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), d, heads, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
            ff: FeedForward::new(params, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
    ) -> Var {
        let h = self.ln1.forward(tape, pv, x);
        let a = self
            .attn
            .forward(tape, pv, h, h, batch, len, len, mask, false);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, pv, x);
        let f = self.ff.forward(tape, pv, h);
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), d, heads, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(
                params,
                &format!("{name}.cross_attn"),
                d,
                heads,
                rng,
            ),
            ln3: LayerNorm::new(params, &format!("{name}.ln3"), d),
            ff: FeedForward::new(params, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        x: Var,
        mem: Var,
        batch: usize,
        tgt_len: usize,
        tgt_mask: &[bool],
        src_len: usize,
        src_mask: &[bool],
    ) -> Var {
        let h = self.ln1.forward(tape, pv, x);
        let a = self
            .self_attn
            .forward(tape, pv, h, h, batch, tgt_len, tgt_len, tgt_mask, true);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, pv, x);
        let c = self
            .cross_attn
            .forward(tape, pv, h, mem, batch, tgt_len, src_len, src_mask, false);
        let x = tape.add(x, c);
        let h = self.ln3.forward(tape, pv, x);
        let f = self.ff.forward(tape, pv, h);
        tape.add(x, f)
    }
}
