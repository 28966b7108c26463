//! Forward and backward passes for the transformer building blocks.
//!
//! Every `*_forward` returns its output plus a cache; the matching
//! `*_backward` consumes that cache, accumulates parameter gradients into a
//! same-shaped parameter struct and returns the gradient for its input.

use super::params::{AttentionParams, FfnParams, LayerNormParams};
use super::tensor::Mat;
use crate::error::{Error, Result};
use crate::float::Float;

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn shape_err(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

// ---------------------------------------------------------------- layer norm

/// `(x - mean) / sqrt(var + 1e-6) * scale + offset` over a single vector.
pub fn layer_norm<F: Float>(x: &[F], scale: &[F], offset: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    normalize_row(x, scale, offset, &mut out);
    out
}

fn normalize_row<F: Float>(x: &[F], scale: &[F], offset: &[F], out: &mut [F]) -> F {
    let n = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + F::of(LAYER_NORM_EPS)).sqrt();
    for (((o, &v), &s), &b) in out.iter_mut().zip(x).zip(scale).zip(offset) {
        *o = (v - mean) * inv_std * s + b;
    }
    inv_std
}

pub struct LayerNormCache<F> {
    xhat: Mat<F>,
    inv_std: Vec<F>,
}

pub fn layer_norm_forward<F: Float>(p: &LayerNormParams<F>, x: &Mat<F>) -> (Mat<F>, LayerNormCache<F>) {
    let mut xhat = Mat::zeros(x.rows(), x.cols());
    let ones = vec![F::one(); x.cols()];
    let zeros = vec![F::zero(); x.cols()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        inv_std.push(normalize_row(x.row(r), &ones, &zeros, xhat.row_mut(r)));
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, &s), &b) in y.row_mut(r).iter_mut().zip(p.scale.data()).zip(p.offset.data()) {
            *v = *v * s + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<F: Float>(
    p: &LayerNormParams<F>,
    cache: &LayerNormCache<F>,
    dy: &Mat<F>,
    grads: &mut LayerNormParams<F>,
) -> Mat<F> {
    let cols = dy.cols();
    let n = F::of(cols as f64);
    let mut dx = Mat::zeros(dy.rows(), cols);
    let mut dxhat = vec![F::zero(); cols];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        for c in 0..cols {
            dxhat[c] = g[c] * p.scale.data()[c];
            grads.scale.data_mut()[c] += g[c] * xh[c];
            grads.offset.data_mut()[c] += g[c];
        }
        let mean_d = dxhat.iter().copied().sum::<F>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<F>() / n;
        let s = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

// ----------------------------------------------------------------- attention

fn softmax_in_place<F: Float>(row: &mut [F], valid: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if valid(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = F::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Attention weights `softmax(q kᵀ / sqrt(d_k))`. Key `j` is excluded when
/// `key_mask[j]` is true or, with `causal`, when `j > i`.
fn attention_weights<F: Float>(q: &Mat<F>, k: &Mat<F>, key_mask: Option<&[bool]>, causal: bool) -> Mat<F> {
    let mut w = q.matmul_t(k);
    w.scale(F::one() / F::of(q.cols() as f64).sqrt());
    for i in 0..w.rows() {
        softmax_in_place(w.row_mut(i), |j| {
            !(causal && j > i) && !key_mask.is_some_and(|m| m[j])
        });
    }
    w
}

/// Scaled dot-product attention. Returns `(output, weights)`.
pub fn scaled_dot_attention<F: Float>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    key_mask: Option<&[bool]>,
) -> Result<(Mat<F>, Mat<F>)> {
    if q.cols() != k.cols() {
        return Err(shape_err("attention", format!("key width {}", q.cols()), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(shape_err("attention", format!("{} value rows", k.rows()), v.rows()));
    }
    if let Some(m) = key_mask {
        if m.len() != k.rows() {
            return Err(shape_err("attention", format!("mask of {}", k.rows()), m.len()));
        }
    }
    let w = attention_weights(q, k, key_mask, false);
    Ok((w.matmul(v), w))
}

pub struct AttentionCache<F> {
    xq: Mat<F>,
    xkv: Option<Mat<F>>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    weights: Vec<Mat<F>>,
    ctx: Mat<F>,
}

/// Multi-head attention with bias-free projections. `xkv = None` means
/// self-attention over `xq`.
pub fn attention_forward<F: Float>(
    p: &AttentionParams<F>,
    xq: &Mat<F>,
    xkv: Option<&Mat<F>>,
    heads: usize,
    causal: bool,
) -> (Mat<F>, AttentionCache<F>) {
    let src = xkv.unwrap_or(xq);
    let q = xq.matmul(&p.wq);
    let k = src.matmul(&p.wk);
    let v = src.matmul(&p.wv);
    let hidden = q.cols();
    let dh = hidden / heads;
    let mut ctx = Mat::zeros(q.rows(), hidden);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let w = attention_weights(&qh, &kh, None, causal);
        ctx.add_col_block(h * dh, &w.matmul(&vh));
        weights.push(w);
    }
    let out = ctx.matmul(&p.wo);
    let cache = AttentionCache {
        xq: xq.clone(),
        xkv: xkv.cloned(),
        q,
        k,
        v,
        weights,
        ctx,
    };
    (out, cache)
}

/// Returns `(d xq, d xkv)`; for self-attention the second is `None` and its
/// contribution is already folded into the first.
pub fn attention_backward<F: Float>(
    p: &AttentionParams<F>,
    cache: &AttentionCache<F>,
    dout: &Mat<F>,
    grads: &mut AttentionParams<F>,
) -> (Mat<F>, Option<Mat<F>>) {
    let heads = cache.weights.len();
    let hidden = cache.q.cols();
    let dh = hidden / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();

    cache.ctx.t_matmul_acc(dout, &mut grads.wo);
    let dctx = dout.matmul_t(&p.wo);

    let mut dq = Mat::zeros(cache.q.rows(), hidden);
    let mut dk = Mat::zeros(cache.k.rows(), hidden);
    let mut dv = Mat::zeros(cache.v.rows(), hidden);
    for (h, w) in cache.weights.iter().enumerate() {
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let dctx_h = dctx.col_block(h * dh, dh);

        let mut dvh = Mat::zeros(vh.rows(), dh);
        w.t_matmul_acc(&dctx_h, &mut dvh);
        let dw = dctx_h.matmul_t(&vh);
        // softmax backward: ds = w * (dw - rowsum(dw * w))
        let mut ds = Mat::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            let wr = w.row(i);
            let dr = dw.row(i);
            let dot: F = wr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                *o = wr[j] * (dr[j] - dot) * scale;
            }
        }
        let dqh = ds.matmul(&kh);
        let mut dkh = Mat::zeros(kh.rows(), dh);
        ds.t_matmul_acc(&qh, &mut dkh);
        dq.add_col_block(h * dh, &dqh);
        dk.add_col_block(h * dh, &dkh);
        dv.add_col_block(h * dh, &dvh);
    }

    let src = cache.xkv.as_ref().unwrap_or(&cache.xq);
    cache.xq.t_matmul_acc(&dq, &mut grads.wq);
    src.t_matmul_acc(&dk, &mut grads.wk);
    src.t_matmul_acc(&dv, &mut grads.wv);

    let mut dxq = dq.matmul_t(&p.wq);
    let mut dsrc = dk.matmul_t(&p.wk);
    dsrc.add_assign(&dv.matmul_t(&p.wv));
    if cache.xkv.is_some() {
        (dxq, Some(dsrc))
    } else {
        dxq.add_assign(&dsrc);
        (dxq, None)
    }
}

// ------------------------------------------------------------------------ ffn

/// `max(0, x W1 + b1) W2 + b2`
pub fn ffn<F: Float>(x: &Mat<F>, w1: &Mat<F>, b1: &Mat<F>, w2: &Mat<F>, b2: &Mat<F>) -> Result<Mat<F>> {
    if x.cols() != w1.rows() {
        return Err(shape_err("ffn", format!("input width {}", w1.rows()), x.cols()));
    }
    if b1.len() != w1.cols() || w2.rows() != w1.cols() {
        return Err(shape_err("ffn", format!("inner size {}", w1.cols()), w2.rows()));
    }
    if b2.len() != w2.cols() {
        return Err(shape_err("ffn", format!("output bias {}", w2.cols()), b2.len()));
    }
    let p = FfnParams {
        w1: w1.clone(),
        b1: b1.clone(),
        w2: w2.clone(),
        b2: b2.clone(),
    };
    Ok(ffn_forward(&p, x).0)
}

pub struct FfnCache<F> {
    x: Mat<F>,
    pre: Mat<F>,
    act: Mat<F>,
}

pub fn ffn_forward<F: Float>(p: &FfnParams<F>, x: &Mat<F>) -> (Mat<F>, FfnCache<F>) {
    let mut pre = x.matmul(&p.w1);
    pre.add_row_vector(&p.b1);
    let act = pre.map(|v| v.max(F::zero()));
    let mut out = act.matmul(&p.w2);
    out.add_row_vector(&p.b2);
    let cache = FfnCache { x: x.clone(), pre, act };
    (out, cache)
}

pub fn ffn_backward<F: Float>(p: &FfnParams<F>, cache: &FfnCache<F>, dy: &Mat<F>, grads: &mut FfnParams<F>) -> Mat<F> {
    cache.act.t_matmul_acc(dy, &mut grads.w2);
    dy.sum_rows_into(&mut grads.b2);
    let mut dpre = dy.matmul_t(&p.w2);
    for (d, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        if z <= F::zero() {
            *d = F::zero();
        }
    }
    cache.x.t_matmul_acc(&dpre, &mut grads.w1);
    dpre.sum_rows_into(&mut grads.b1);
    dpre.matmul_t(&p.w1)
}
