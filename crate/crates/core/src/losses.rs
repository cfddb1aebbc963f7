//! Token-level training losses: cross-entropy and the Incomplete-Trust loss
//! `α·CE + β·DCE` with `DCE = −Σ_i p_i log(δ p_i + (1−δ) q_i)`, where `p` is
//! the model distribution and `q` the one-hot label.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Floor applied to every log argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InTrustParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for InTrustParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            delta: 0.5,
        }
    }
}

impl InTrustParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(LossError::InvalidParams(format!(
                "need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(LossError::InvalidParams(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

fn check_distribution<T: Scalar>(probs: &[T], label: usize) -> Result<(), LossError> {
    if label >= probs.len() {
        return Err(LossError::InvalidDistribution(format!(
            "label {label} outside {} classes",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
        return Err(LossError::InvalidDistribution(
            "negative or non-finite entry".into(),
        ));
    }
    let sum: f64 = probs.iter().map(|p| p.f64()).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

#[inline]
fn clamped_ln<T: Scalar>(x: T) -> T {
    x.max(T::of(LOG_CLAMP)).ln()
}

/// −log p[label]
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T, LossError> {
    check_distribution(probs, label)?;
    Ok(-clamped_ln(probs[label]))
}

/// −Σ_i p_i log(δ p_i + (1−δ) q_i) with q the one-hot vector of `label`.
pub fn dce<T: Scalar>(probs: &[T], label: usize, delta: f64) -> Result<T, LossError> {
    check_distribution(probs, label)?;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(LossError::InvalidParams(format!(
            "delta {delta} outside (0, 1]"
        )));
    }
    Ok(dce_unchecked(probs, label, T::of(delta)))
}

fn dce_unchecked<T: Scalar>(probs: &[T], label: usize, delta: T) -> T {
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        let q = if i == label { T::one() } else { T::zero() };
        acc -= p * clamped_ln(delta * p + (T::one() - delta) * q);
    }
    // Each term is −p·log(a) with a ≤ 1, so the sum is ≥ 0 up to rounding.
    acc.max(T::zero())
}

/// α·CE + β·DCE for one token.
pub fn in_trust<T: Scalar>(
    probs: &[T],
    label: usize,
    params: &InTrustParams,
) -> Result<T, LossError> {
    params.validate()?;
    check_distribution(probs, label)?;
    let ce = -clamped_ln(probs[label]);
    let d = dce_unchecked(probs, label, T::of(params.delta));
    Ok(T::of(params.alpha) * ce + T::of(params.beta) * d)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// A per-token loss on logits with its gradient.
pub trait TokenLoss<T: Scalar> {
    /// Loss for one row of logits and its gradient with respect to the logits.
    fn value_and_grad(&self, logits: &[T], label: usize) -> (T, Vec<T>);
}

/// Loss selector carried in training configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    InTrust(InTrustParams),
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::InTrust(InTrustParams::default())
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::InTrust(p) => p.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::InTrust(_) => "in_trust",
        }
    }
}

/// Chain a gradient with respect to probabilities through the softmax:
/// dz_j = p_j (g_j − Σ_i p_i g_i).
fn through_softmax<T: Scalar>(p: &[T], g: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    p.iter().zip(g).map(|(&pj, &gj)| pj * (gj - dot)).collect()
}

fn ce_logit_grad<T: Scalar>(p: &[T], label: usize) -> (T, Vec<T>) {
    let py = p[label].max(T::of(LOG_CLAMP));
    let mut g = p.to_vec();
    g[label] -= T::one();
    (-py.ln(), g)
}

fn dce_logit_grad<T: Scalar>(p: &[T], label: usize, delta: T) -> (T, Vec<T>) {
    let floor = T::of(LOG_CLAMP);
    let mut value = T::zero();
    let mut gp = vec![T::zero(); p.len()];
    for (i, &pi) in p.iter().enumerate() {
        let q = if i == label { T::one() } else { T::zero() };
        let a = delta * pi + (T::one() - delta) * q;
        if a > floor {
            let la = a.ln();
            value -= pi * la;
            gp[i] = -la - pi * delta / a;
        } else {
            let la = floor.ln();
            value -= pi * la;
            gp[i] = -la;
        }
    }
    (value.max(T::zero()), through_softmax(p, &gp))
}

impl<T: Scalar> TokenLoss<T> for LossKind {
    fn value_and_grad(&self, logits: &[T], label: usize) -> (T, Vec<T>) {
        let p = softmax(logits);
        match self {
            LossKind::CrossEntropy => ce_logit_grad(&p, label),
            LossKind::InTrust(params) => {
                let (a, b) = (T::of(params.alpha), T::of(params.beta));
                let (ce, gce) = ce_logit_grad(&p, label);
                let (d, gd) = dce_logit_grad(&p, label, T::of(params.delta));
                let grad = gce.iter().zip(&gd).map(|(&x, &y)| a * x + b * y).collect();
                (a * ce + b * d, grad)
            }
        }
    }
}

/// Mean loss over rows whose target is `Some`, with the gradient of that
/// mean with respect to the full logits matrix.
pub fn batch_token_loss<T: Scalar, L: TokenLoss<T> + ?Sized>(
    loss: &L,
    logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
) -> (T, Vec<T>) {
    assert_eq!(
        logits.len(),
        vocab * targets.len(),
        "logits/targets mismatch"
    );
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![T::zero(); logits.len()];
    if count == 0 {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::of(count as f64);
    let mut total = T::zero();
    for (r, t) in targets.iter().enumerate() {
        if let Some(label) = *t {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let (v, g) = loss.value_and_grad(row, label);
            total += v;
            for (dst, &gv) in grad[r * vocab..(r + 1) * vocab].iter_mut().zip(&g) {
                *dst = gv * inv;
            }
        }
    }
    (total * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Per-class summation straight from the definition, independent of
    /// the implementation's loop.
    fn dce_oracle(p: &[f64], label: usize, delta: f64) -> f64 {
        let mut terms = Vec::new();
        for (i, &pi) in p.iter().enumerate() {
            let q = if i == label { 1.0 } else { 0.0 };
            terms.push(-pi * f64::max(delta * pi + (1.0 - delta) * q, 1e-12).ln());
        }
        terms.iter().sum()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25f64; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let capped = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((capped - 12.0 * 10f64.ln()).abs() < 1e-9);
        assert!((capped - 27.63).abs() < 0.01);
    }

    #[test]
    fn dce_examples() {
        assert_eq!(dce(&[0.0, 1.0], 1, 0.5).unwrap(), 0.0);
        let uniform = dce(&[0.5, 0.5], 0, 0.5).unwrap();
        let expected = -(0.5 * 0.75f64.ln() + 0.5 * 0.25f64.ln());
        assert!((uniform - expected).abs() < 1e-12);
        assert!((uniform - 0.83699).abs() < 1e-5);
        assert!((uniform - dce_oracle(&[0.5, 0.5], 0, 0.5)).abs() < 1e-12);
        let p = [0.2, 0.3, 0.5];
        let entropy: f64 = p.iter().map(|&x: &f64| -x * x.ln()).sum();
        assert!((dce(&p, 0, 1.0).unwrap() - entropy).abs() < 1e-12);
        assert!((dce(&p, 2, 1.0).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn in_trust_examples() {
        let p = [0.1, 0.6, 0.3];
        let ce = cross_entropy(&p, 1).unwrap();
        let d = dce(&p, 1, 0.5).unwrap();
        let only_ce = InTrustParams {
            alpha: 1.0,
            beta: 0.0,
            delta: 0.5,
        };
        let only_dce = InTrustParams {
            alpha: 0.0,
            beta: 1.0,
            delta: 0.5,
        };
        assert_eq!(in_trust(&p, 1, &only_ce).unwrap(), ce);
        assert_eq!(in_trust(&p, 1, &only_dce).unwrap(), d);
        let both = in_trust(&[0.5, 0.5], 0, &InTrustParams::default()).unwrap();
        assert!((both - (LN2 + 0.836_988)).abs() < 1e-5);
        assert!((both - 1.53014).abs() < 1e-5);
    }

    #[test]
    fn invalid_inputs() {
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(dce(&[0.5, 0.5], 0, 0.0).is_err());
        assert!(InTrustParams {
            alpha: 0.0,
            beta: 0.0,
            delta: 0.5
        }
        .validate()
        .is_err());
        assert!(InTrustParams {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = [0.3f64, -1.2, 2.0, 0.1, -0.4];
        for loss in [
            LossKind::CrossEntropy,
            LossKind::InTrust(InTrustParams::default()),
            LossKind::InTrust(InTrustParams {
                alpha: 0.3,
                beta: 2.0,
                delta: 0.9,
            }),
        ] {
            for label in 0..5 {
                let (v, g) = loss.value_and_grad(&logits, label);
                let p = softmax(&logits);
                let direct = match loss {
                    LossKind::CrossEntropy => cross_entropy(&p, label).unwrap(),
                    LossKind::InTrust(ps) => in_trust(&p, label, &ps).unwrap(),
                };
                assert!((v - direct).abs() < 1e-12);
                for j in 0..5 {
                    let eps = 1e-6;
                    let mut up = logits;
                    up[j] += eps;
                    let mut dn = logits;
                    dn[j] -= eps;
                    let num = (loss.value_and_grad(&up, label).0
                        - loss.value_and_grad(&dn, label).0)
                        / (2.0 * eps);
                    assert!((num - g[j]).abs() < 1e-7, "{loss:?} label {label} j {j}");
                }
            }
        }
    }

    #[test]
    fn batch_loss_skips_padding() {
        let logits = [1.0f64, 2.0, 0.5, 0.5, 3.0, 1.0];
        let (v, g) = batch_token_loss(
            &LossKind::CrossEntropy,
            &logits,
            2,
            &[Some(1), None, Some(0)],
        );
        let a = -log_softmax(&logits[0..2])[1];
        let c = -log_softmax(&logits[4..6])[0];
        assert!((v - (a + c) / 2.0).abs() < 1e-12);
        assert_eq!(&g[2..4], &[0.0, 0.0]);
        let (v, _) = batch_token_loss::<f64, _>(&LossKind::CrossEntropy, &logits, 2, &[None; 3]);
        assert_eq!(v, 0.0);
    }

    fn distribution() -> impl Strategy<Value = (Vec<f64>, usize)> {
        proptest::collection::vec(0.0f64..1.0, 2..8).prop_flat_map(|raw| {
            let sum: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw
                .iter()
                .map(|x| (x + 1e-9 / raw.len() as f64) / sum)
                .collect();
            let n = p.len();
            (Just(p), 0..n)
        })
    }

    proptest! {
        #[test]
        fn in_trust_reduces_to_ce((p, label) in distribution()) {
            let ps = InTrustParams { alpha: 1.0, beta: 0.0, delta: 0.5 };
            prop_assert_eq!(in_trust(&p, label, &ps).unwrap(), cross_entropy(&p, label).unwrap());
        }

        #[test]
        fn dce_nonnegative_and_matches_oracle((p, label) in distribution(), delta in 0.01f64..=1.0) {
            let v = dce(&p, label, delta).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - dce_oracle(&p, label, delta).max(0.0)).abs() < 1e-9);
        }

        #[test]
        fn dce_permutation_equivariant((p, label) in distribution(), shift in 0usize..8) {
            let n = p.len();
            let perm: Vec<f64> = (0..n).map(|i| p[(i + shift) % n]).collect();
            let new_label = (label + n - shift % n) % n;
            let a = dce(&p, label, 0.5).unwrap();
            let b = dce(&perm, new_label, 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn dce_zero_only_for_confident_correct((p, label) in distribution()) {
            let v = dce(&p, label, 0.5).unwrap();
            if p[label] < 0.999 {
                prop_assert!(v > 0.0);
            }
        }
    }
}
