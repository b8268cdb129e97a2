//! Small trainable building blocks with hand-written backward passes.
//!
//! Every learnable tensor is a [`Param`] carrying its value and gradient
//! side by side. Modules expose their parameters through [`Visit`], which
//! the optimizer and the checkpoint code consume; names must be unique
//! within one model.

use ndarray::{Array, Array1, Array2, Axis, Dimension};
use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S, D: Dimension> {
    pub value: Array<S, D>,
    pub grad: Array<S, D>,
}

pub type Param1<S> = Param<S, ndarray::Ix1>;
pub type Param2<S> = Param<S, ndarray::Ix2>;

impl<S: Scalar, D: Dimension> Param<S, D> {
    pub fn new(value: Array<S, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// One named parameter group handed to a visitor. Slices are the flattened
/// tensor in row-major order.
pub struct ParamView<'a, S> {
    pub name: String,
    /// Multiplier applied to the learning rate for this group.
    pub lr_scale: S,
    /// Take raw gradient steps instead of moment-normalized ones. Meant for
    /// single bounded physical parameters whose vanishing gradients Adam
    /// would otherwise amplify into constant-velocity drift.
    pub plain: bool,
    pub value: &'a mut [S],
    pub grad: &'a mut [S],
}

pub trait Visit<S: Scalar> {
    /// Calls `f` once per parameter group, in a fixed deterministic order.
    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, S>));
}

/// Helper for implementing [`Visit`] on a [`Param`].
pub fn view_param<'a, S: Scalar, D: Dimension>(
    name: &str,
    lr_scale: S,
    p: &'a mut Param<S, D>,
) -> ParamView<'a, S> {
    ParamView {
        name: name.to_string(),
        lr_scale,
        plain: false,
        value: p.value.as_slice_mut().expect("standard layout"),
        grad: p.grad.as_slice_mut().expect("standard layout"),
    }
}

/// Snapshot of all parameter values keyed by group name.
pub fn collect_params<S: Scalar>(model: &mut dyn Visit<S>) -> BTreeMap<String, Vec<S>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |p: ParamView<'_, S>| {
        out.insert(p.name.clone(), p.value.to_vec());
    });
    out
}

/// Writes a snapshot back into the model. Every group must be present with
/// a matching length.
pub fn load_params<S: Scalar>(
    model: &mut dyn Visit<S>,
    snapshot: &BTreeMap<String, Vec<S>>,
) -> Result<()> {
    let mut err = None;
    model.visit(&mut |p: ParamView<'_, S>| {
        if err.is_some() {
            return;
        }
        match snapshot.get(&p.name) {
            Some(vals) if vals.len() == p.value.len() => {
                p.value.copy_from_slice(vals);
            }
            Some(vals) => {
                err = Some(Error::LengthMismatch(format!(
                    "parameter {}: checkpoint has {} values, model needs {}",
                    p.name,
                    vals.len(),
                    p.value.len()
                )));
            }
            None => {
                err = Some(Error::InvalidArgument(format!(
                    "checkpoint is missing parameter {}",
                    p.name
                )));
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn zero_grads<S: Scalar>(model: &mut dyn Visit<S>) {
    model.visit(&mut |p: ParamView<'_, S>| {
        for g in p.grad.iter_mut() {
            *g = S::zero();
        }
    });
}

/// Uniform Xavier/Glorot initialization for a (rows=out, cols=in) matrix.
pub fn xavier<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| sc(rng.random_range(-bound..bound)))
}

/// Small-scale uniform initialization for embedding tables.
pub fn embed_init<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<S> {
    Array2::from_shape_fn((rows, cols), |_| sc(rng.random_range(-0.05..0.05)))
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Dense layer `y = x W^T + b` with weight shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Param2<S>,
    pub bias: Param1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Param::new(xavier(rng, out_dim, in_dim)),
            bias: Param::new(Array1::zeros(out_dim)),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.weight.value.t()) + &self.bias.value
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<S>, d_out: &Array2<S>) -> Array2<S> {
        self.weight.grad += &d_out.t().dot(x);
        self.bias.grad += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        f(view_param(&format!("{prefix}.weight"), S::one(), &mut self.weight));
        f(view_param(&format!("{prefix}.bias"), S::one(), &mut self.bias));
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gain: Param1<S>,
    pub bias: Param1<S>,
    pub eps: S,
}

/// Normalized inputs and inverse standard deviations kept for backward.
pub struct LayerNormCache<S> {
    x_hat: Array2<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Param::new(Array1::ones(width)),
            bias: Param::new(Array1::zeros(width)),
            eps: sc(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let n = x.ncols();
        let inv_n = S::one() / sc::<S>(n as f64);
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let s = S::one() / (var + self.eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            *is = s;
        }
        let y = &x_hat * &self.gain.value + &self.bias.value;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, d_out: &Array2<S>) -> Array2<S> {
        let n = cache.x_hat.ncols();
        let inv_n = S::one() / sc::<S>(n as f64);
        self.gain.grad += &(d_out * &cache.x_hat).sum_axis(Axis(0));
        self.bias.grad += &d_out.sum_axis(Axis(0));
        let mut dx = Array2::zeros(cache.x_hat.raw_dim());
        for ((dy_row, xh_row), (mut dx_row, &is)) in d_out
            .rows()
            .into_iter()
            .zip(cache.x_hat.rows())
            .zip(dx.rows_mut().into_iter().zip(cache.inv_std.iter()))
        {
            let mut sum_dxh = S::zero();
            let mut sum_dxh_xh = S::zero();
            for (&dy, (&xh, &g)) in dy_row.iter().zip(xh_row.iter().zip(self.gain.value.iter())) {
                let dxh = dy * g;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            for ((dx_v, &dy), (&xh, &g)) in dx_row
                .iter_mut()
                .zip(dy_row.iter())
                .zip(xh_row.iter().zip(self.gain.value.iter()))
            {
                let dxh = dy * g;
                *dx_v = is * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        f(view_param(&format!("{prefix}.gain"), S::one(), &mut self.gain));
        f(view_param(&format!("{prefix}.bias"), S::one(), &mut self.bias));
    }
}

/// `silu(x) = x * sigmoid(x)`, chosen over relu for smooth finite-difference
/// behaviour in the gradient checks.
pub fn silu<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<S: Scalar>(x: &Array2<S>, d_out: &Array2<S>) -> Array2<S> {
    let mut dx = d_out.clone();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        let s = sigmoid(v);
        *d *= s * (S::one() + v * (S::one() - s));
    }
    dx
}

/// Embedding table with scatter-add backward.
#[derive(Debug, Clone)]
pub struct Embedding<S> {
    pub table: Param2<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn init<R: Rng>(rng: &mut R, rows: usize, width: usize) -> Self {
        Self {
            table: Param::new(embed_init(rng, rows, width)),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.value.nrows()
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Array2<S>> {
        let mut out = Array2::zeros((ids.len(), self.table.value.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            if id >= self.rows() {
                return Err(Error::UnknownToken {
                    id,
                    vocab: self.rows(),
                });
            }
            row.assign(&self.table.value.row(id));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[usize], d_out: &Array2<S>) {
        for (row, &id) in d_out.rows().into_iter().zip(ids) {
            let mut g = self.table.grad.row_mut(id);
            g += &row;
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        f(view_param(prefix, S::one(), &mut self.table));
    }
}
