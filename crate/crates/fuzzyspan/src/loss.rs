//! Boundary losses: per-position binary cross-entropy, the KL loss against
//! fuzzy targets, and their weighted combination. Every loss returns its
//! exact gradient with respect to the logits.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::boundary::{softmax, BoundaryDistribution, SpanAnnotation};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Coefficients of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<S> {
    /// Weight of the fuzzy span term. Zero recovers plain BCE exactly.
    pub lambda: S,
    /// Lower clamp applied to probabilities before taking logs.
    pub epsilon_floor: S,
}

impl<S: Scalar> LossConfig<S> {
    pub fn new(lambda: S, epsilon_floor: S) -> Result<Self> {
        if lambda < S::zero() || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        if !(epsilon_floor > S::zero()) || epsilon_floor > sc::<S>(1e-4) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_floor must lie in (0, 1e-4], got {epsilon_floor}"
            )));
        }
        Ok(Self {
            lambda,
            epsilon_floor,
        })
    }
}

impl<S: Scalar> Default for LossConfig<S> {
    fn default() -> Self {
        Self {
            lambda: sc(0.01),
            epsilon_floor: sc(1e-12),
        }
    }
}

/// Raw start/end boundary scores, one per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLogits<S> {
    pub start: Array1<S>,
    pub end: Array1<S>,
}

impl<S: Scalar> BoundaryLogits<S> {
    pub fn new(start: Array1<S>, end: Array1<S>) -> Result<Self> {
        if start.len() != end.len() {
            return Err(Error::LengthMismatch(format!(
                "start logits ({}) vs end logits ({})",
                start.len(),
                end.len()
            )));
        }
        if start.iter().chain(end.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "boundary logits must be finite".into(),
            ));
        }
        Ok(Self { start, end })
    }

    pub fn seq_len(&self) -> usize {
        self.start.len()
    }

    pub fn zero_like(&self) -> Self {
        Self {
            start: Array1::zeros(self.start.len()),
            end: Array1::zeros(self.end.len()),
        }
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + exp(-|z|))` without overflow.
fn softplus_neg_abs<S: Scalar>(z: S) -> S {
    (S::one() + (-z.abs()).exp()).ln()
}

/// Mean binary cross-entropy over positions and over both boundary vectors.
///
/// Labels are 1 at every gold start (resp. end) position, 0 elsewhere.
/// Returns the loss and its gradient with respect to the logits.
pub fn bce_boundary_loss<S: Scalar>(
    logits: &BoundaryLogits<S>,
    gold: &[SpanAnnotation],
) -> Result<(S, BoundaryLogits<S>)> {
    let n = logits.seq_len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot score an empty logit vector".into(),
        ));
    }
    for span in gold {
        span.validate(n)?;
    }
    let mut y_start = vec![S::zero(); n];
    let mut y_end = vec![S::zero(); n];
    for span in gold {
        y_start[span.start] = S::one();
        y_end[span.end] = S::one();
    }
    let denom = sc::<S>((2 * n) as f64);
    let mut loss = S::zero();
    let mut grad = logits.zero_like();
    for (z_vec, y_vec, g_vec) in [
        (&logits.start, &y_start, &mut grad.start),
        (&logits.end, &y_end, &mut grad.end),
    ] {
        for i in 0..n {
            let (z, y) = (z_vec[i], y_vec[i]);
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            loss += z.max(S::zero()) - z * y + softplus_neg_abs(z);
            g_vec[i] = (sigmoid(z) - y) / denom;
        }
    }
    Ok((loss / denom, grad))
}

/// KL divergence from the fuzzy targets to the softmax of the logits,
/// summed over the start and end boundaries.
///
/// Zero-mass target positions contribute exactly zero; predicted
/// probabilities are clamped below by `epsilon_floor` before the log.
pub fn kl_fuzzy_loss<S: Scalar>(
    logits: &BoundaryLogits<S>,
    targets: &(BoundaryDistribution<S>, BoundaryDistribution<S>),
    epsilon_floor: S,
) -> Result<(S, BoundaryLogits<S>)> {
    let n = logits.seq_len();
    if targets.0.seq_len() != n || targets.1.seq_len() != n {
        return Err(Error::LengthMismatch(format!(
            "logits length {} vs targets ({}, {})",
            n,
            targets.0.seq_len(),
            targets.1.seq_len()
        )));
    }
    let mut loss = S::zero();
    let mut grad = logits.zero_like();
    for (z_vec, q, g_vec) in [
        (&logits.start, &targets.0, &mut grad.start),
        (&logits.end, &targets.1, &mut grad.end),
    ] {
        let p = softmax(z_vec.as_slice().expect("contiguous logits"));
        for i in 0..n {
            let qi = q.probs[i];
            if qi > S::zero() {
                loss += qi * (qi.ln() - p[i].max(epsilon_floor).ln());
            }
            // d KL / d z_i = p_i - q_i for softmax + KL.
            g_vec[i] = p[i] - qi;
        }
    }
    Ok((loss, grad))
}

/// Combined loss `L_ori + lambda * L_fuzzy`.
///
/// The BCE term averages over positions; the KL term averages over the
/// provided span targets (one `(start, end)` pair per gold span).
pub fn total_loss<S: Scalar>(
    logits: &BoundaryLogits<S>,
    gold: &[SpanAnnotation],
    targets: &[(BoundaryDistribution<S>, BoundaryDistribution<S>)],
    cfg: &LossConfig<S>,
) -> Result<(S, BoundaryLogits<S>)> {
    let (bce, mut grad) = bce_boundary_loss(logits, gold)?;
    let mut loss = bce;
    if cfg.lambda > S::zero() && !targets.is_empty() {
        let scale = cfg.lambda / sc::<S>(targets.len() as f64);
        for pair in targets {
            let (kl, kl_grad) = kl_fuzzy_loss(logits, pair, cfg.epsilon_floor)?;
            loss += scale * kl;
            grad.start = grad.start + &kl_grad.start * scale;
            grad.end = grad.end + &kl_grad.end * scale;
        }
    }
    Ok((loss, grad))
}
