//! Span-bounded attention: relative-position scores, per-head attenuation
//! masks with a learnable span fraction, and the masked softmax layer that
//! produces span-aware representations.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{view_param, xavier, Param, Param2, ParamView, Visit};
use crate::scalar::{sc, Scalar};

/// Shape of the mask's decay beyond the full-attention length `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attenuation {
    /// Ramp from 1 at `z = l` down to 0 at `z = l + d`.
    Linear,
    /// Hard cutoff at `z = l`.
    Step,
    /// Gaussian tail with std `d/3`, scaled to 1 at `z = l`.
    GaussianTail,
}

/// Which positions each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Positions `[t - L_span, t]`, the self position included.
    Backward,
    /// Positions with `|t - r| <= L_span`.
    Symmetric,
}

/// Per-head mask state. `delta` is the only learnable field; the full
/// attention length is `l = delta * l_span`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: crate::scalar::Scalar"))]
pub struct FsaHeadState<S> {
    pub delta: S,
    #[serde(skip, default = "crate::scalar::zero")]
    pub delta_grad: S,
    pub l_span: usize,
    pub d: usize,
    pub variant: Attenuation,
}

impl<S: Scalar> FsaHeadState<S> {
    pub fn new(delta: S, l_span: usize, d: usize, variant: Attenuation) -> Result<Self> {
        if l_span == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "l_span and d must be positive, got l_span={l_span}, d={d}"
            )));
        }
        if !(delta >= S::zero() && delta <= S::one()) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in [0, 1], got {delta}"
            )));
        }
        Ok(Self {
            delta,
            delta_grad: S::zero(),
            l_span,
            d,
            variant,
        })
    }

    /// Full-attention length `l = delta * l_span`.
    pub fn l(&self) -> S {
        self.delta * sc::<S>(self.l_span as f64)
    }

    /// Mask value at offset `z >= 0`.
    pub fn attenuation(&self, z: S) -> S {
        let l = self.l();
        let d = sc::<S>(self.d as f64);
        match self.variant {
            Attenuation::Linear => ((l + d - z) / d).min(S::one()).max(S::zero()),
            Attenuation::Step => {
                if z <= l {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Attenuation::GaussianTail => {
                if z <= l {
                    S::one()
                } else {
                    // Unnormalized Gaussian in (z - l), std d/3; value 1 at
                    // the span edge keeps the mask continuous.
                    let std = d / sc::<S>(3.0);
                    let u = (z - l) / std;
                    (-u * u / sc::<S>(2.0)).exp()
                }
            }
        }
    }

    /// Derivative of the mask wrt `l` at fixed `z`; zero at kinks and on
    /// flat regions.
    pub fn attenuation_dl(&self, z: S) -> S {
        let l = self.l();
        let d = sc::<S>(self.d as f64);
        match self.variant {
            Attenuation::Linear => {
                let raw = (l + d - z) / d;
                if raw > S::zero() && raw < S::one() {
                    S::one() / d
                } else {
                    S::zero()
                }
            }
            Attenuation::Step => S::zero(),
            Attenuation::GaussianTail => {
                if z <= l {
                    S::zero()
                } else {
                    let std = d / sc::<S>(3.0);
                    let u = (z - l) / std;
                    (-u * u / sc::<S>(2.0)).exp() * u / std
                }
            }
        }
    }
}

/// Projections and relative-position embeddings shared by all heads.
///
/// `rel` holds one row per offset in `[0, l_span]`; offsets are clipped to
/// `l_span` before lookup. Rows are `head_dim` wide and shared across heads.
#[derive(Debug, Clone)]
pub struct RpeAttentionParams<S> {
    pub w_q: Param2<S>,
    pub w_k: Param2<S>,
    pub w_v: Param2<S>,
    pub rel: Param2<S>,
    pub num_heads: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
}

impl<S: Scalar> RpeAttentionParams<S> {
    pub fn init<R: Rng>(
        rng: &mut R,
        num_heads: usize,
        head_dim: usize,
        l_span: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 || l_span == 0 || max_seq_len == 0 {
            return Err(Error::InvalidConfig(
                "attention dimensions must be positive".into(),
            ));
        }
        let width = num_heads * head_dim;
        Ok(Self {
            w_q: Param::new(xavier(rng, width, width)),
            w_k: Param::new(xavier(rng, width, width)),
            w_v: Param::new(xavier(rng, width, width)),
            rel: Param::new(crate::nn::embed_init(rng, l_span + 1, head_dim)),
            num_heads,
            head_dim,
            max_seq_len,
        })
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Maximum offset covered by the relative embedding table.
    pub fn l_span(&self) -> usize {
        self.rel.value.nrows() - 1
    }
}

/// Inclusive window of keys for query position `t`.
fn window_bounds(t: usize, n: usize, l_span: usize, window: WindowMode) -> (usize, usize) {
    let lo = t.saturating_sub(l_span);
    let hi = match window {
        WindowMode::Backward => t,
        WindowMode::Symmetric => (t + l_span).min(n - 1),
    };
    (lo, hi)
}

fn offset(t: usize, r: usize, window: WindowMode) -> usize {
    match window {
        WindowMode::Backward => t - r,
        WindowMode::Symmetric => t.abs_diff(r),
    }
}

/// Per-head score matrices `s_tr = q_t . (k_r + p_{t-r})` over the window.
/// Entries outside the window are left at zero.
pub fn rpe_scores<S: Scalar>(
    x: &Array2<S>,
    params: &RpeAttentionParams<S>,
    window: WindowMode,
) -> Result<Vec<Array2<S>>> {
    let n = x.nrows();
    if n > params.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: params.max_seq_len,
        });
    }
    if x.ncols() != params.width() {
        return Err(Error::LengthMismatch(format!(
            "input width {} vs model width {}",
            x.ncols(),
            params.width()
        )));
    }
    let q = x.dot(&params.w_q.value.t());
    let k = x.dot(&params.w_k.value.t());
    let l_span = params.l_span();
    let hd = params.head_dim;
    let mut out = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let qh = q.slice(s![.., h * hd..(h + 1) * hd]);
        let kh = k.slice(s![.., h * hd..(h + 1) * hd]);
        let mut scores = Array2::zeros((n, n));
        for t in 0..n {
            let (lo, hi) = window_bounds(t, n, l_span, window);
            for r in lo..=hi {
                let z = offset(t, r, window).min(l_span);
                let p = params.rel.value.row(z);
                let mut dot = S::zero();
                for i in 0..hd {
                    dot += qh[[t, i]] * (kh[[r, i]] + p[i]);
                }
                scores[[t, r]] = dot;
            }
        }
        out.push(scores);
    }
    Ok(out)
}

/// One masked softmax row. `entries` holds `(key position, mask value)` for
/// the window; a row whose mask is identically zero falls back to weight 1
/// on `self_pos`.
pub(crate) struct MaskedRow<S> {
    /// `(r, a_tr)` over the window.
    pub weights: Vec<(usize, S)>,
    /// `(r, exp(s_tr - m) / D)`, the mask-gradient factor; empty on fallback.
    pub e_over_d: Vec<(usize, S)>,
    pub fallback: bool,
}

pub(crate) fn masked_softmax_row<S: Scalar>(
    score_of: &dyn Fn(usize) -> S,
    entries: &[(usize, S)],
    self_pos: usize,
) -> MaskedRow<S> {
    let mut m = S::neg_infinity();
    for &(r, _) in entries {
        m = m.max(score_of(r));
    }
    let exps: Vec<S> = entries.iter().map(|&(r, _)| (score_of(r) - m).exp()).collect();
    let denom: S = entries
        .iter()
        .zip(&exps)
        .map(|(&(_, g), &e)| g * e)
        .sum();
    if denom == S::zero() {
        return MaskedRow {
            weights: vec![(self_pos, S::one())],
            e_over_d: Vec::new(),
            fallback: true,
        };
    }
    let weights = entries
        .iter()
        .zip(&exps)
        .map(|(&(r, g), &e)| (r, g * e / denom))
        .collect();
    let e_over_d = entries
        .iter()
        .zip(&exps)
        .map(|(&(r, _), &e)| (r, e / denom))
        .collect();
    MaskedRow {
        weights,
        e_over_d,
        fallback: false,
    }
}

/// Applies each head's mask to its score matrix and normalizes rows.
pub fn fsa_weights<S: Scalar>(
    scores: &[Array2<S>],
    heads: &[FsaHeadState<S>],
    window: WindowMode,
) -> Result<Vec<Array2<S>>> {
    if scores.len() != heads.len() {
        return Err(Error::LengthMismatch(format!(
            "{} score matrices vs {} heads",
            scores.len(),
            heads.len()
        )));
    }
    let mut out = Vec::with_capacity(heads.len());
    for (mat, head) in scores.iter().zip(heads) {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("attention scores must be finite".into()));
        }
        let n = mat.nrows();
        let mut a = Array2::zeros((n, n));
        for t in 0..n {
            let (lo, hi) = window_bounds(t, n, head.l_span, window);
            let entries: Vec<(usize, S)> = (lo..=hi)
                .map(|r| (r, head.attenuation(sc(offset(t, r, window) as f64))))
                .collect();
            let row = masked_softmax_row(&|r| mat[[t, r]], &entries, t);
            for (r, w) in row.weights {
                a[[t, r]] = w;
            }
        }
        out.push(a);
    }
    Ok(out)
}

/// The span-aware attention layer. Sits on top of the encoder; its output
/// feeds only the boundary head.
#[derive(Debug, Clone)]
pub struct FsaLayer<S> {
    pub params: RpeAttentionParams<S>,
    pub heads: Vec<FsaHeadState<S>>,
    pub window: WindowMode,
    /// Learning-rate multiplier for the per-head `delta` parameters.
    pub span_lr_scale: S,
}

/// Forward intermediates needed by [`FsaLayer::backward`].
pub struct FsaCache<S> {
    x: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    weights: Vec<Array2<S>>,
    e_over_d: Vec<Array2<S>>,
    fallback: Vec<Vec<bool>>,
}

impl<S: Scalar> FsaCache<S> {
    pub fn weights(&self) -> &[Array2<S>] {
        &self.weights
    }
}

impl<S: Scalar> FsaLayer<S> {
    pub fn init<R: Rng>(
        rng: &mut R,
        num_heads: usize,
        head_dim: usize,
        head_template: &FsaHeadState<S>,
        window: WindowMode,
        max_seq_len: usize,
        span_lr_scale: S,
    ) -> Result<Self> {
        if span_lr_scale <= S::zero() {
            return Err(Error::InvalidConfig(format!(
                "span_lr_scale must be positive, got {span_lr_scale}"
            )));
        }
        let params =
            RpeAttentionParams::init(rng, num_heads, head_dim, head_template.l_span, max_seq_len)?;
        let heads = vec![head_template.clone(); num_heads];
        Ok(Self {
            params,
            heads,
            window,
            span_lr_scale,
        })
    }

    /// Clamps every `delta` to [0, 1]; the trainer calls this after each
    /// optimizer step (projected update).
    pub fn clamp_deltas(&mut self) {
        for head in &mut self.heads {
            head.delta = head.delta.min(S::one()).max(S::zero());
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<(Array2<S>, FsaCache<S>)> {
        let scores = rpe_scores(x, &self.params, self.window)?;
        let n = x.nrows();
        let hd = self.params.head_dim;
        let q = x.dot(&self.params.w_q.value.t());
        let k = x.dot(&self.params.w_k.value.t());
        let v = x.dot(&self.params.w_v.value.t());
        let mut weights = Vec::with_capacity(self.heads.len());
        let mut e_over_d = Vec::with_capacity(self.heads.len());
        let mut fallback = Vec::with_capacity(self.heads.len());
        let mut out = Array2::zeros((n, self.params.width()));
        for (h, head) in self.heads.iter().enumerate() {
            if head.l_span != self.params.l_span() {
                return Err(Error::InvalidConfig(format!(
                    "head l_span {} disagrees with embedding table {}",
                    head.l_span,
                    self.params.l_span()
                )));
            }
            let vh = v.slice(s![.., h * hd..(h + 1) * hd]);
            let mat = &scores[h];
            let mut a = Array2::zeros((n, n));
            let mut eod = Array2::zeros((n, n));
            let mut fb = vec![false; n];
            for t in 0..n {
                let (lo, hi) = window_bounds(t, n, head.l_span, self.window);
                let entries: Vec<(usize, S)> = (lo..=hi)
                    .map(|r| (r, head.attenuation(sc(offset(t, r, self.window) as f64))))
                    .collect();
                let row = masked_softmax_row(&|r| mat[[t, r]], &entries, t);
                fb[t] = row.fallback;
                for &(r, w) in &row.weights {
                    a[[t, r]] = w;
                    for i in 0..hd {
                        out[[t, h * hd + i]] += w * vh[[r, i]];
                    }
                }
                for (r, e) in row.e_over_d {
                    eod[[t, r]] = e;
                }
            }
            weights.push(a);
            e_over_d.push(eod);
            fallback.push(fb);
        }
        Ok((
            out,
            FsaCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                e_over_d,
                fallback,
            },
        ))
    }

    /// Accumulates parameter gradients (including each head's `delta_grad`)
    /// and returns the gradient wrt the layer input.
    pub fn backward(&mut self, cache: &FsaCache<S>, d_out: &Array2<S>) -> Array2<S> {
        let n = cache.x.nrows();
        let hd = self.params.head_dim;
        let l_span = self.params.l_span();
        let mut dq = Array2::zeros((n, self.params.width()));
        let mut dk = Array2::zeros((n, self.params.width()));
        let mut dv = Array2::zeros((n, self.params.width()));
        for (h, head) in self.heads.iter_mut().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let doh = d_out.slice(cols);
            let a = &cache.weights[h];
            let eod = &cache.e_over_d[h];
            let mut dl = S::zero();
            for t in 0..n {
                let (lo, hi) = window_bounds(t, n, head.l_span, self.window);
                // dv and da flow through every attended position, fallback
                // rows included (a is constant there but still weights v).
                let da: Vec<S> = (lo..=hi)
                    .map(|r| {
                        let w = a[[t, r]];
                        if w != S::zero() {
                            for i in 0..hd {
                                dv[[r, h * hd + i]] += w * doh[[t, i]];
                            }
                        }
                        (0..hd).map(|i| doh[[t, i]] * vh[[r, i]]).sum()
                    })
                    .collect();
                if cache.fallback[h][t] {
                    continue;
                }
                let c: S = da
                    .iter()
                    .zip(lo..=hi)
                    .map(|(&d, r)| d * a[[t, r]])
                    .sum();
                for (idx, r) in (lo..=hi).enumerate() {
                    let factor = da[idx] - c;
                    let ds = a[[t, r]] * factor;
                    let dg = eod[[t, r]] * factor;
                    let z = offset(t, r, self.window);
                    let zc = z.min(l_span);
                    if ds != S::zero() {
                        let p = self.params.rel.value.row(zc);
                        for i in 0..hd {
                            dq[[t, h * hd + i]] += ds * (kh[[r, i]] + p[i]);
                            dk[[r, h * hd + i]] += ds * qh[[t, i]];
                            self.params.rel.grad[[zc, i]] += ds * qh[[t, i]];
                        }
                    }
                    dl += dg * head.attenuation_dl(sc(z as f64));
                }
            }
            head.delta_grad += dl * sc::<S>(head.l_span as f64);
        }
        self.params.w_q.grad += &dq.t().dot(&cache.x);
        self.params.w_k.grad += &dk.t().dot(&cache.x);
        self.params.w_v.grad += &dv.t().dot(&cache.x);
        dq.dot(&self.params.w_q.value)
            + dk.dot(&self.params.w_k.value)
            + dv.dot(&self.params.w_v.value)
    }

    /// Attention matrices and learned span lengths for one input, in the
    /// shape the dump command serializes.
    pub fn attention_dump(&self, x: &Array2<S>) -> Result<AttentionDump<S>> {
        let (_, cache) = self.forward(x)?;
        let heads = self
            .heads
            .iter()
            .zip(&cache.weights)
            .enumerate()
            .map(|(i, (head, a))| HeadDump {
                head: i,
                delta: head.delta,
                l: head.l(),
                weights: a.rows().into_iter().map(|r| r.to_vec()).collect(),
            })
            .collect();
        Ok(AttentionDump { heads })
    }
}

impl<S: Scalar> Visit<S> for FsaLayer<S> {
    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, S>)) {
        f(view_param("fsa.w_q", S::one(), &mut self.params.w_q));
        f(view_param("fsa.w_k", S::one(), &mut self.params.w_k));
        f(view_param("fsa.w_v", S::one(), &mut self.params.w_v));
        f(view_param("fsa.rel", S::one(), &mut self.params.rel));
        for (i, head) in self.heads.iter_mut().enumerate() {
            // Plain steps: the span fraction's gradient fades to zero once
            // the ramp zone clears the attended offsets, and the head must
            // stop there rather than keep drifting at Adam's floor speed.
            f(ParamView {
                name: format!("fsa.head{i}.delta"),
                lr_scale: self.span_lr_scale,
                plain: true,
                value: std::slice::from_mut(&mut head.delta),
                grad: std::slice::from_mut(&mut head.delta_grad),
            });
        }
    }
}

/// JSON payload of the dump-attention command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDump<S> {
    pub heads: Vec<HeadDump<S>>,
}

/// One head's weights `a_tr` (row per query) plus its learned span length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadDump<S> {
    pub head: usize,
    pub delta: S,
    pub l: S,
    pub weights: Vec<Vec<S>>,
}
