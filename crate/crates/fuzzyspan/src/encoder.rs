//! Post-norm transformer blocks for the toy backbone: full bidirectional
//! self-attention plus a silu feed-forward, each wrapped in residual and
//! layer normalization.

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, LayerNorm, LayerNormCache, Linear, ParamView};
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone)]
pub struct EncoderBlock<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln1: LayerNorm<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub num_heads: usize,
    pub head_dim: usize,
}

pub struct BlockCache<S> {
    x: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    attn: Vec<Array2<S>>,
    concat: Array2<S>,
    y1: Array2<S>,
    ln1: LayerNormCache<S>,
    h_pre: Array2<S>,
    h_act: Array2<S>,
    ln2: LayerNormCache<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    pub fn init<R: Rng>(rng: &mut R, num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::InvalidConfig(
                "encoder head counts must be positive".into(),
            ));
        }
        let width = num_heads * head_dim;
        Ok(Self {
            wq: Linear::init(rng, width, width),
            wk: Linear::init(rng, width, width),
            wv: Linear::init(rng, width, width),
            wo: Linear::init(rng, width, width),
            ln1: LayerNorm::new(width),
            ff1: Linear::init(rng, 4 * width, width),
            ff2: Linear::init(rng, width, 4 * width),
            ln2: LayerNorm::new(width),
            num_heads,
            head_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, BlockCache<S>) {
        let n = x.nrows();
        let hd = self.head_dim;
        let scale = S::one() / sc::<S>(hd as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut concat = Array2::zeros((n, self.width()));
        let mut attn = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            concat.slice_mut(cols).assign(&scores.dot(&vh));
            attn.push(scores);
        }
        let attn_out = self.wo.forward(&concat);
        let res1 = x + &attn_out;
        let (y1, ln1) = self.ln1.forward(&res1);
        let h_pre = self.ff1.forward(&y1);
        let h_act = silu(&h_pre);
        let ff_out = self.ff2.forward(&h_act);
        let res2 = &y1 + &ff_out;
        let (y2, ln2) = self.ln2.forward(&res2);
        (
            y2,
            BlockCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                concat,
                y1,
                ln1,
                h_pre,
                h_act,
                ln2,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<S>, d_out: &Array2<S>) -> Array2<S> {
        let hd = self.head_dim;
        let scale = S::one() / sc::<S>(hd as f64).sqrt();
        let d_res2 = self.ln2.backward(&cache.ln2, d_out);
        let d_h_act = self.ff2.backward(&cache.h_act, &d_res2);
        let d_h_pre = silu_backward(&cache.h_pre, &d_h_act);
        let mut d_y1 = self.ff1.backward(&cache.y1, &d_h_pre);
        d_y1 += &d_res2;
        let d_res1 = self.ln1.backward(&cache.ln1, &d_y1);
        let d_concat = self.wo.backward(&cache.concat, &d_res1);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let a = &cache.attn[h];
            let d_oh = d_concat.slice(cols);
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
            let da = d_oh.dot(&vh.t());
            // Softmax backward per row: ds = a * (da - sum(da * a)).
            let mut ds = da.clone();
            for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
                let c: S = ds_row.iter().zip(a_row.iter()).map(|(&d, &w)| d * w).sum();
                for (d, &w) in ds_row.iter_mut().zip(a_row.iter()) {
                    *d = w * (*d - c);
                }
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let mut dx = d_res1.clone();
        dx += &self.wq.backward(&cache.x, &dq);
        dx += &self.wk.backward(&cache.x, &dk);
        dx += &self.wv.backward(&cache.x, &dv);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }
}
