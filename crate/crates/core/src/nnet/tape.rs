//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows × cols` matrix; batch and time are
//! flattened into rows. Attention, layer norm and the loss heads are fused
//! ops with hand-written backward passes.

use crate::scalar::Scalar;

use super::kernels;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` flags; `false` marks padded keys.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

enum Op<T> {
    Leaf {
        param: Option<usize>,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    /// Scalar output whose gradient with respect to each input was computed
    /// during the forward pass.
    ScalarFn {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

/// Records operations for a single forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let finite = self.first_non_finite.is_some() || value.iter().all(|v| v.is_finite());
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        let var = Var(self.nodes.len() - 1);
        if !finite {
            self.first_non_finite = Some(var);
        }
        var
    }

    /// The earliest recorded value containing NaN or ±∞, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.first_non_finite
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; its gradient is reported under `param`.
    pub fn param(&mut self, param: usize, value: Vec<T>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Leaf { param: Some(param) })
    }

    pub fn constant(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Leaf { param: None })
    }

    /// Select rows of `src` (embedding lookup, or picking positions).
    pub fn gather(&mut self, src: Var, rows: &[usize]) -> Var {
        let (sr, cols) = self.shape(src);
        let sv = &self.nodes[src.0].value;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < sr, "gather row {r} out of range {sr}");
            out.extend_from_slice(&sv[r * cols..(r + 1) * cols]);
        }
        self.push(
            out,
            rows.len(),
            cols,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            m,
            k,
            n,
        );
        self.push(out, m, n, Op::MatMul { a, b })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.nodes[bias.0].value.len(), n, "bias width");
        let bv = &self.nodes[bias.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(out, m, n, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes differ");
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(out, m, n, Op::Add { a, b })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        self.push(out, m, n, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(out, m, n, Op::Tanh { x })
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        self.push(
            out,
            m,
            n,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Scaled dot-product attention over `heads` column slices of q/k/v.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qr, d) = self.shape(q);
        assert_eq!(qr, spec.batch * spec.q_len, "query rows");
        assert_eq!(self.shape(k), (spec.batch * spec.k_len, d), "key shape");
        assert_eq!(self.shape(v), (spec.batch * spec.k_len, d), "value shape");
        assert_eq!(spec.key_mask.len(), spec.batch * spec.k_len, "key mask");
        assert_eq!(d % spec.heads, 0, "d_model divisible by heads");
        let (out, probs) = kernels::attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            d,
            &spec,
        );
        self.push(
            out,
            qr,
            d,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        )
    }

    /// Average the listed rows of `x` for each group.
    pub fn mean_pool(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let (_, n) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); groups.len() * n];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty pooling group");
            let inv = T::one() / T::of(rows.len() as f64);
            let dst = &mut out[g * n..(g + 1) * n];
            for &r in rows {
                for (o, &v) in dst.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                    *o += v * inv;
                }
            }
        }
        let rows = groups.len();
        self.push(out, rows, n, Op::MeanPool { x, groups })
    }

    /// Record a scalar produced outside the tape together with its gradient
    /// with respect to each input.
    pub fn scalar_fn(&mut self, value: T, inputs: Vec<Var>, grads: Vec<Vec<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.nodes[i.0].value.len(), g.len(), "gradient size");
        }
        self.push(vec![value], 1, 1, Op::ScalarFn { inputs, grads })
    }

    /// Backpropagate from a scalar output. Returns the gradient of every
    /// parameter leaf indexed by parameter id (`None` if it took no part).
    pub fn backward(&self, out: Var, num_params: usize) -> Vec<Option<Vec<T>>> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Option<Vec<T>>> = (0..num_params).map(|_| None).collect();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        accumulate(&mut param_grads[*p], &g);
                    }
                }
                Op::Gather { src, rows } => {
                    let cols = node.cols;
                    let len = self.nodes[src.0].value.len();
                    let dst = slot(&mut grads, *src, len);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            dst[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = slot(&mut grads, *a, m * k);
                    kernels::matmul_bt_acc(&g, bv, da, m, n, k);
                    let db = slot(&mut grads, *b, k * n);
                    kernels::matmul_at_acc(av, &g, db, m, k, n);
                }
                Op::AddBias { x, bias } => {
                    let n = node.cols;
                    accumulate(&mut grads[x.0], &g);
                    let db = slot(&mut grads, *bias, n);
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<T> = xv.iter().zip(&g).map(|(&v, &d)| d * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<T> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&y, &d)| d * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = (node.rows, node.cols);
                    let gv = &self.nodes[gamma.0].value;
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    {
                        let dg = slot(&mut grads, *gamma, n);
                        for r in 0..m {
                            for c in 0..n {
                                dg[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    {
                        let db = slot(&mut grads, *beta, n);
                        for r in 0..m {
                            for c in 0..n {
                                db[c] += g[r * n + c];
                            }
                        }
                    }
                    for r in 0..m {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..n {
                            let dh = g[r * n + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = g[r * n + c] * gv[c];
                            dx[r * n + c] =
                                rstd[r] / nf * (nf * dh - sum_dh - xhat[r * n + c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let d = node.cols;
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        probs,
                        d,
                        spec,
                    );
                    accumulate(&mut grads[q.0], &dq);
                    accumulate(&mut grads[k.0], &dk);
                    accumulate(&mut grads[v.0], &dv);
                }
                Op::MeanPool { x, groups } => {
                    let n = node.cols;
                    let len = self.nodes[x.0].value.len();
                    let dx = slot(&mut grads, *x, len);
                    for (gi, rows) in groups.iter().enumerate() {
                        let inv = T::one() / T::of(rows.len() as f64);
                        for &r in rows {
                            for c in 0..n {
                                dx[r * n + c] += g[gi * n + c] * inv;
                            }
                        }
                    }
                }
                Op::ScalarFn {
                    inputs,
                    grads: local,
                } => {
                    let up = g[0];
                    for (inp, lg) in inputs.iter().zip(local) {
                        let scaled: Vec<T> = lg.iter().map(|&v| v * up).collect();
                        accumulate(&mut grads[inp.0], &scaled);
                    }
                }
            }
        }
        param_grads
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => {
            for (a, &b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Build a scalar from a graph over parameters, then compare the tape
    /// gradient against central differences for every parameter entry.
    fn check<F>(params: Vec<(Vec<f64>, usize, usize)>, f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |ps: &[(Vec<f64>, usize, usize)]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps
                .iter()
                .enumerate()
                .map(|(i, (v, r, c))| t.param(i, v.clone(), *r, *c))
                .collect();
            let out = f(&mut t, &vars);
            (t, out)
        };
        let (tape, out) = eval(&params);
        let grads = tape.backward(out, params.len());
        let eps = 1e-6;
        for (pi, (vals, _, _)) in params.iter().enumerate() {
            for j in 0..vals.len() {
                let mut plus = params.clone();
                plus[pi].0[j] += eps;
                let mut minus = params.clone();
                minus[pi].0[j] -= eps;
                let (tp, op) = eval(&plus);
                let (tm, om) = eval(&minus);
                let numeric = (tp.value(op)[0] - tm.value(om)[0]) / (2.0 * eps);
                let analytic = grads[pi].as_ref().map_or(0.0, |g| g[j]);
                let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
                assert!(
                    err < 1e-5,
                    "param {pi}[{j}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    /// Weighted sum of all entries so that every output receives a distinct
    /// upstream gradient.
    fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
        let vals = t.value(x).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = rand_vec(&mut rng, vals.len());
        let s = vals.iter().zip(&w).map(|(a, b)| a * b).sum();
        t.scalar_fn(s, vec![x], vec![w])
    }

    #[test]
    fn matmul_bias_gelu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            (rand_vec(&mut rng, 6), 2, 3),
            (rand_vec(&mut rng, 12), 3, 4),
            (rand_vec(&mut rng, 4), 1, 4),
        ];
        check(params, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_bias(h, v[2]);
            let h = t.gelu(h);
            let h = t.tanh(h);
            weighted_sum(t, h, 7)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            (rand_vec(&mut rng, 15), 3, 5),
            (rand_vec(&mut rng, 5), 1, 5),
            (rand_vec(&mut rng, 5), 1, 5),
        ];
        check(params, |t, v| {
            let h = t.layer_norm(v[0], v[1], v[2]);
            weighted_sum(t, h, 3)
        });
    }

    #[test]
    fn gather_add_pool_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            (rand_vec(&mut rng, 12), 4, 3),
            (rand_vec(&mut rng, 9), 3, 3),
        ];
        check(params, |t, v| {
            let g = t.gather(v[0], &[2, 0, 2]);
            let s = t.add(g, v[1]);
            let p = t.mean_pool(s, vec![vec![0, 1], vec![2], vec![0, 1, 2]]);
            weighted_sum(t, p, 5)
        });
    }

    #[test]
    fn attention_grad_masked_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, tq, tk, d) = (2, 3, 4, 4);
        let params = vec![
            (rand_vec(&mut rng, b * tq * d), b * tq, d),
            (rand_vec(&mut rng, b * tk * d), b * tk, d),
            (rand_vec(&mut rng, b * tk * d), b * tk, d),
        ];
        let mask = vec![true, true, true, false, true, true, false, false];
        check(params.clone(), |t, v| {
            let spec = AttnSpec {
                batch: b,
                q_len: tq,
                k_len: tk,
                heads: 2,
                key_mask: mask.clone(),
                causal: false,
            };
            let o = t.attention(v[0], v[1], v[2], spec);
            weighted_sum(t, o, 9)
        });
        let params = vec![
            (rand_vec(&mut rng, b * tq * d), b * tq, d),
            (rand_vec(&mut rng, b * tq * d), b * tq, d),
            (rand_vec(&mut rng, b * tq * d), b * tq, d),
        ];
        check(params, |t, v| {
            let spec = AttnSpec {
                batch: b,
                q_len: tq,
                k_len: tq,
                heads: 2,
                key_mask: vec![true; b * tq],
                causal: true,
            };
            let o = t.attention(v[0], v[1], v[2], spec);
            weighted_sum(t, o, 11)
        });
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0f64) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn unused_params_have_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param(0, vec![1.0, 2.0], 1, 2);
        let _b = t.param(1, vec![3.0], 1, 1);
        let s = t.scalar_fn(3.0, vec![a], vec![vec![1.0, 1.0]]);
        let g = t.backward(s, 2);
        assert_eq!(g[0].as_deref(), Some(&[1.0, 1.0][..]));
        assert!(g[1].is_none());
    }
}
