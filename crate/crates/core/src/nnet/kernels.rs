//! Dense kernels behind the tape ops. Row-major throughout.

use crate::scalar::Scalar;

use super::tape::AttnSpec;

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// da[m×k] += g[m×n] · b[k×n]ᵀ
pub fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let drow = &mut da[i * k..(i + 1) * k];
        for (p, d) in drow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            *d += acc;
        }
    }
}

/// db[k×n] += a[m×k]ᵀ · g[m×n]
pub fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

#[inline]
fn visible(spec: &AttnSpec, b: usize, i: usize, j: usize) -> bool {
    spec.key_mask[b * spec.k_len + j] && (!spec.causal || j <= i)
}

/// Returns (output, attention probabilities laid out [batch][head][q][k]).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    spec: &AttnSpec,
) -> (Vec<T>, Vec<T>) {
    let (bs, tq, tk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
    let dh = d / h;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); bs * tq * d];
    let mut probs = vec![T::zero(); bs * h * tq * tk];
    let mut scores = vec![T::zero(); tk];
    for b in 0..bs {
        for hd in 0..h {
            let off = hd * dh;
            for i in 0..tq {
                let qrow = &q[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..tk {
                    if visible(spec, b, i, j) {
                        let krow = &k[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        let mut s = T::zero();
                        for (&x, &y) in qrow.iter().zip(krow) {
                            s += x * y;
                        }
                        s *= scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let prow =
                    &mut probs[((b * h + hd) * tq + i) * tk..((b * h + hd) * tq + i + 1) * tk];
                let mut z = T::zero();
                for j in 0..tk {
                    if visible(spec, b, i, j) {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        z += e;
                    }
                }
                let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                for j in 0..tk {
                    if prow[j] == T::zero() {
                        continue;
                    }
                    prow[j] /= z;
                    let p = prow[j];
                    let vrow = &v[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of attention with respect to q, k and v.
pub fn attention_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    spec: &AttnSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (bs, tq, tk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
    let dh = d / h;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); tk];
    for b in 0..bs {
        for hd in 0..h {
            let off = hd * dh;
            for i in 0..tq {
                let prow = &probs[((b * h + hd) * tq + i) * tk..((b * h + hd) * tq + i + 1) * tk];
                let qi = (b * tq + i) * d + off;
                let grow = &g[qi..qi + dh];
                let mut dot = T::zero();
                for j in 0..tk {
                    let p = prow[j];
                    if p == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let kj = (b * tk + j) * d + off;
                    let vrow = &v[kj..kj + dh];
                    let mut s = T::zero();
                    for (&x, &y) in grow.iter().zip(vrow) {
                        s += x * y;
                    }
                    dp[j] = s;
                    dot += p * s;
                    for (dvv, &gg) in dv[kj..kj + dh].iter_mut().zip(grow) {
                        *dvv += p * gg;
                    }
                }
                for j in 0..tk {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    let kj = (b * tk + j) * d + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * k[kj + c];
                        dk[kj + c] += ds * q[qi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
