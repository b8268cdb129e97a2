//! Fuzzy boundary target distributions.
//!
//! A gold span boundary is replaced by a truncated, discretized, normalized
//! Gaussian over token positions: the pdf is sampled at one `step` per token
//! offset from the gold index, samples below `theta` are dropped, and the
//! survivors are normalized with a softmax. The result is a soft target that
//! concentrates mass on the annotated position while admitting its neighbors.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Which boundaries of a span receive fuzziness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideMode {
    /// Both the start and the end boundary get a fuzzy target.
    BothSides,
    /// Only the start boundary is fuzzy; the end target stays one-hot.
    StartOnly,
}

/// Parameters of the fuzzy boundary generator.
///
/// `sigma` is the Gaussian std, `theta` the truncation threshold on raw pdf
/// values, and `step` the pdf-argument distance between adjacent token
/// indices. All three live in pdf-argument units, not token units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyConfig<S> {
    pub sigma: S,
    pub theta: S,
    pub step: S,
    pub side_mode: SideMode,
}

impl<S: Scalar> FuzzyConfig<S> {
    /// Validates `sigma > 0`, `step > 0` and `0 <= theta < pdf(0; sigma)`.
    ///
    /// The peak bound guarantees the gold index itself always survives
    /// truncation, so the support can never be empty.
    pub fn new(sigma: S, theta: S, step: S, side_mode: SideMode) -> Result<Self> {
        if !(sigma > S::zero()) || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        if !(step > S::zero()) || !step.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step must be positive and finite, got {step}"
            )));
        }
        let peak = gaussian_pdf(S::zero(), S::zero(), sigma)?;
        if theta < S::zero() || !(theta < peak) {
            return Err(Error::InvalidConfig(format!(
                "theta must lie in [0, pdf peak {peak}), got {theta}"
            )));
        }
        Ok(Self {
            sigma,
            theta,
            step,
            side_mode,
        })
    }
}

/// A normalized discrete probability vector over token positions for one
/// boundary. `probs` is zero outside `support` (inclusive index pair), sums
/// to one, and peaks at `gt_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistribution<S> {
    pub probs: Array1<S>,
    pub gt_index: usize,
    pub support: (usize, usize),
}

impl<S: Scalar> BoundaryDistribution<S> {
    /// Degenerate one-hot target at `index`.
    pub fn one_hot(index: usize, seq_len: usize) -> Result<Self> {
        if index >= seq_len {
            return Err(Error::IndexOutOfRange {
                index,
                len: seq_len,
            });
        }
        let mut probs = Array1::zeros(seq_len);
        probs[index] = S::one();
        Ok(Self {
            probs,
            gt_index: index,
            support: (index, index),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.probs.len()
    }

    /// Width of the support in positions, inclusive of both ends.
    pub fn support_width(&self) -> usize {
        self.support.1 - self.support.0 + 1
    }
}

/// Gaussian probability density `N(mu, sigma^2)` evaluated at `x`.
pub fn gaussian_pdf<S: Scalar>(x: S, mu: S, sigma: S) -> Result<S> {
    if !(sigma > S::zero()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian_pdf requires sigma > 0, got {sigma}"
        )));
    }
    let two_pi = sc::<S>(2.0 * std::f64::consts::PI);
    let z = (x - mu) / sigma;
    Ok((-(z * z) / sc::<S>(2.0)).exp() / (sigma * two_pi.sqrt()))
}

/// Largest non-negative offset `k` such that `pdf(k * step) >= theta`.
///
/// Solved in closed form from the pdf (`x^2 <= 2 sigma^2 ln(peak/theta)`),
/// then nudged by at most a couple of steps to absorb rounding at the
/// threshold boundary. `theta == 0` keeps every offset.
fn max_kept_offset<S: Scalar>(cfg: &FuzzyConfig<S>, hard_cap: usize) -> usize {
    if cfg.theta == S::zero() {
        return hard_cap;
    }
    let peak = S::one() / (cfg.sigma * sc::<S>(2.0 * std::f64::consts::PI).sqrt());
    let x_star = cfg.sigma * (sc::<S>(2.0) * (peak / cfg.theta).ln()).sqrt();
    let mut k = (x_star / cfg.step).floor().to_f64() as usize;
    k = k.min(hard_cap);
    let kept = |k: usize| -> bool {
        gaussian_pdf(sc::<S>(k as f64) * cfg.step, S::zero(), cfg.sigma)
            .map(|v| v >= cfg.theta)
            .unwrap_or(false)
    };
    while k > 0 && !kept(k) {
        k -= 1;
    }
    while k < hard_cap && kept(k + 1) {
        k += 1;
    }
    k
}

/// Builds the fuzzy target distribution for one boundary.
///
/// Token at offset `k` from `gt_index` gets the raw score
/// `pdf(k * step; 0, sigma)`; offsets whose score falls below `theta` are
/// excluded entirely, the remainder is clipped to the sequence and
/// normalized with a softmax over the surviving raw scores.
pub fn generate_boundary_distribution<S: Scalar>(
    gt_index: usize,
    seq_len: usize,
    cfg: &FuzzyConfig<S>,
) -> Result<BoundaryDistribution<S>> {
    if seq_len == 0 || gt_index >= seq_len {
        return Err(Error::IndexOutOfRange {
            index: gt_index,
            len: seq_len,
        });
    }
    let k_max = max_kept_offset(cfg, seq_len);
    let lo = gt_index.saturating_sub(k_max);
    let hi = (gt_index + k_max).min(seq_len - 1);

    // Raw pdf samples over the clipped support. The peak bound in
    // FuzzyConfig guarantees lo <= gt_index <= hi.
    let raw: Vec<S> = (lo..=hi)
        .map(|i| {
            let k = i as f64 - gt_index as f64;
            gaussian_pdf(sc::<S>(k) * cfg.step, S::zero(), cfg.sigma)
        })
        .collect::<Result<_>>()?;

    let mut probs = Array1::zeros(seq_len);
    for (i, p) in softmax(&raw).into_iter().enumerate() {
        probs[lo + i] = p;
    }
    Ok(BoundaryDistribution {
        probs,
        gt_index,
        support: (lo, hi),
    })
}

/// Fuzzy (or one-hot, per `side_mode`) targets for both boundaries of a span.
pub fn span_targets<S: Scalar>(
    span: &SpanAnnotation,
    seq_len: usize,
    cfg: &FuzzyConfig<S>,
) -> Result<(BoundaryDistribution<S>, BoundaryDistribution<S>)> {
    span.validate(seq_len)?;
    let start = generate_boundary_distribution(span.start, seq_len, cfg)?;
    let end = match cfg.side_mode {
        SideMode::BothSides => generate_boundary_distribution(span.end, seq_len, cfg)?,
        SideMode::StartOnly => BoundaryDistribution::one_hot(span.end, seq_len)?,
    };
    Ok((start, end))
}

/// Gold span on a token sequence; `end` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub type_id: usize,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, type_id: usize) -> Self {
        Self {
            start,
            end,
            type_id,
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.start > self.end {
            return Err(Error::InvertedSpan {
                start: self.start,
                end: self.end,
            });
        }
        if self.end >= seq_len {
            return Err(Error::IndexOutOfRange {
                index: self.end,
                len: seq_len,
            });
        }
        Ok(())
    }

    /// Number of tokens covered, inclusive of both boundaries.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Numerically stable softmax over a non-empty slice.
pub(crate) fn softmax<S: Scalar>(values: &[S]) -> Vec<S> {
    let max = values.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(sigma: f64, theta: f64, step: f64) -> FuzzyConfig<f64> {
        FuzzyConfig::new(sigma, theta, step, SideMode::BothSides).unwrap()
    }

    /// Brute-force reference: evaluate the pdf at every token position,
    /// threshold, then softmax by hand. Deliberately ignores the closed-form
    /// support computation used by the implementation.
    fn oracle(gt: usize, seq_len: usize, c: &FuzzyConfig<f64>) -> Vec<f64> {
        let pdf = |x: f64| {
            (-x * x / (2.0 * c.sigma * c.sigma)).exp()
                / (c.sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let raw: Vec<Option<f64>> = (0..seq_len)
            .map(|i| {
                let v = pdf((i as f64 - gt as f64) * c.step);
                (v >= c.theta).then_some(v)
            })
            .collect();
        let max = raw
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = raw.iter().flatten().map(|v| (v - max).exp()).sum();
        raw.iter()
            .map(|v| v.map_or(0.0, |v| ((v - max).exp()) / denom))
            .collect()
    }

    #[test]
    fn pdf_golden_values() {
        assert!((gaussian_pdf::<f64>(0.0, 0.0, 0.5).unwrap() - 0.79788).abs() < 1e-5);
        assert!((gaussian_pdf::<f64>(0.6, 0.0, 0.5).unwrap() - 0.38837).abs() < 1e-5);
    }

    #[test]
    fn pdf_translation_invariance() {
        for mu in [-3.0, 0.0, 2.5, 117.0] {
            let peak: f64 = gaussian_pdf(mu, mu, 0.7).unwrap();
            assert!((peak - gaussian_pdf(0.0, 0.0, 0.7).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        // Trapezoid quadrature cross-check of the closed form.
        let sigma = 0.5;
        let (a, b, n) = (-8.0, 8.0, 400_000);
        let h = (b - a) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * gaussian_pdf(a + i as f64 * h, 0.0, sigma).unwrap();
        }
        assert!((total * h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pdf_rejects_bad_sigma() {
        assert!(gaussian_pdf(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_pdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn config_rejects_theta_at_or_above_peak() {
        // peak for sigma = 0.5 is ~0.7979
        assert!(FuzzyConfig::new(0.5, 0.8, 0.3, SideMode::BothSides).is_err());
        assert!(FuzzyConfig::new(0.5, -0.1, 0.3, SideMode::BothSides).is_err());
        assert!(FuzzyConfig::new(-0.5, 0.3, 0.3, SideMode::BothSides).is_err());
        assert!(FuzzyConfig::new(0.5, 0.3, 0.0, SideMode::BothSides).is_err());
        assert!(FuzzyConfig::new(0.5, 0.79, 0.3, SideMode::BothSides).is_ok());
    }

    #[test]
    fn golden_distribution_interior() {
        let d = generate_boundary_distribution(10, 40, &cfg(0.5, 0.3, 0.3)).unwrap();
        assert_eq!(d.support, (8, 12));
        assert_eq!(d.support_width(), 5);
        let expected = [0.16268, 0.21482, 0.24501, 0.21482, 0.16268];
        for (i, e) in expected.iter().enumerate() {
            assert!(
                (d.probs[8 + i] - e).abs() < 1e-4,
                "probs[{}] = {}, want {}",
                8 + i,
                d.probs[8 + i],
                e
            );
        }
        let o = oracle(10, 40, &cfg(0.5, 0.3, 0.3));
        for i in 0..40 {
            assert!((d.probs[i] - o[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn golden_distribution_left_truncated() {
        let d = generate_boundary_distribution(0, 40, &cfg(0.5, 0.3, 0.3)).unwrap();
        assert_eq!(d.support, (0, 2));
        let sum: f64 = d.probs.sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let argmax = d
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0);
        let o = oracle(0, 40, &cfg(0.5, 0.3, 0.3));
        for i in 0..40 {
            assert!((d.probs[i] - o[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dirac_limit_small_sigma() {
        let d = generate_boundary_distribution(10, 40, &cfg(0.01, 0.3, 0.3)).unwrap();
        assert_eq!(d.support, (10, 10));
        assert!((d.probs[10] - 1.0).abs() < 1e-12);
        assert_eq!(d.probs.iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn gt_out_of_range_errors() {
        assert!(generate_boundary_distribution(40, 40, &cfg(0.5, 0.3, 0.3)).is_err());
        assert!(generate_boundary_distribution(0, 0, &cfg(0.5, 0.3, 0.3)).is_err());
    }

    #[test]
    fn span_targets_both_sides() {
        let (s, e) = span_targets(&SpanAnnotation::new(3, 7, 0), 40, &cfg(0.5, 0.3, 0.3)).unwrap();
        assert_eq!(s.gt_index, 3);
        assert_eq!(e.gt_index, 7);
        assert!(s.support_width() > 1);
        assert!(e.support_width() > 1);
    }

    #[test]
    fn span_targets_start_only() {
        let c = FuzzyConfig::new(0.5, 0.3, 0.3, SideMode::StartOnly).unwrap();
        let (s, e) = span_targets(&SpanAnnotation::new(3, 7, 0), 40, &c).unwrap();
        assert!(s.support_width() > 1);
        assert_eq!(e.support, (7, 7));
        assert!((e.probs[7] - 1.0f64).abs() < 1e-15);
    }

    #[test]
    fn span_targets_single_token_span() {
        let (s, e) = span_targets(&SpanAnnotation::new(5, 5, 0), 40, &cfg(0.5, 0.3, 0.3)).unwrap();
        assert_eq!(s, e);
        assert_eq!(s.gt_index, 5);
    }

    #[test]
    fn inverted_span_errors() {
        assert!(span_targets(&SpanAnnotation::new(7, 3, 0), 40, &cfg(0.5, 0.3, 0.3)).is_err());
    }

    #[test]
    fn support_width_monotone_in_sigma() {
        let grid = [0.1, 0.3, 0.5, 1.0];
        for gt in [0usize, 5, 20, 39] {
            let mut last = 0;
            for sigma in grid {
                let d = generate_boundary_distribution(gt, 40, &cfg(sigma, 0.3, 0.3)).unwrap();
                assert!(
                    d.support_width() >= last,
                    "support shrank at sigma={sigma} gt={gt}"
                );
                last = d.support_width();
            }
        }
    }

    #[test]
    fn theta_zero_keeps_everything() {
        let d = generate_boundary_distribution(3, 17, &cfg(0.5, 0.0, 0.3)).unwrap();
        assert_eq!(d.support, (0, 16));
        assert!(d.probs.iter().all(|&p| p > 0.0));
        let o = oracle(3, 17, &cfg(0.5, 0.0, 0.3));
        for i in 0..17 {
            assert!((d.probs[i] - o[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_and_invariants(
            gt in 0usize..64,
            extra in 1usize..64,
            sigma in 0.05f64..1.2,
            theta_frac in 0.0f64..0.99,
            step in 0.05f64..1.0,
        ) {
            let seq_len = gt + extra;
            let peak = gaussian_pdf(0.0, 0.0, sigma).unwrap();
            let c = cfg(sigma, theta_frac * peak, step);
            let d = generate_boundary_distribution(gt, seq_len, &c).unwrap();

            // Oracle equivalence.
            let o = oracle(gt, seq_len, &c);
            for i in 0..seq_len {
                prop_assert!((d.probs[i] - o[i]).abs() < 1e-9);
            }

            // Normalization and support.
            let sum: f64 = d.probs.sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..seq_len {
                let inside = i >= d.support.0 && i <= d.support.1;
                prop_assert_eq!(d.probs[i] > 0.0, inside);
            }

            // Peak at the gold index, non-increasing away from it.
            let argmax = d.probs.iter().enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(argmax, gt);
            for i in d.support.0..gt {
                prop_assert!(d.probs[i] <= d.probs[i + 1] + 1e-15);
            }
            for i in gt..d.support.1 {
                prop_assert!(d.probs[i] >= d.probs[i + 1] - 1e-15);
            }

            // Symmetry whenever the support is not clipped by the edges.
            let radius = (d.support.1 - gt).min(gt - d.support.0);
            if d.support == (gt - radius, gt + radius) {
                for k in 0..=radius {
                    prop_assert!((d.probs[gt - k] - d.probs[gt + k]).abs() < 1e-12);
                }
            }
        }
    }
}
