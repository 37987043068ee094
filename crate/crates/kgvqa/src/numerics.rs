//! Shared neural primitives and the finite-difference gradient oracle.
//!
//! Every primitive here comes as a pure forward function plus an explicit
//! backward companion; there is no autograd graph anywhere in the crate.
//! The backward passes are validated against [`finite_diff_gradient`],
//! which is the independent oracle for all of them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

// --- softmax ---

/// Numerically stable softmax over a slice. Subtract-max is mandatory.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over the last axis of a tensor of any rank.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.shape()[x.rank() - 1];
    let mut out = Tensor::zeros(x.shape());
    for (dst, src) in out
        .data_mut()
        .chunks_mut(d)
        .zip(x.data().chunks(d))
    {
        dst.copy_from_slice(&softmax_slice(src));
    }
    out
}

/// Backward through one softmax slice: `y` is the forward output.
pub fn softmax_backward_slice(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    y.iter().zip(dy).map(|(&a, &b)| a * (b - inner)).collect()
}

// --- gelu ---

/// Exact-erf GELU, x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

/// d/dx of x * Phi(x) = Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for ((o, &xv), &g) in out.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *o = gelu_grad_scalar(xv) * g;
    }
    out
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

// --- layer norm ---

pub struct LayerNormCache {
    /// Normalized pre-affine values, same shape as the input.
    pub xhat: Tensor,
    /// One inverse standard deviation per last-axis slice.
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the last axis with learnable gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let d = x.shape()[x.rank() - 1];
    assert!(d >= 2, "layer_norm needs last-axis extent >= 2");
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for ((dst, hat), src) in out
        .data_mut()
        .chunks_mut(d)
        .zip(xhat.data_mut().chunks_mut(d))
        .zip(x.data().chunks(d))
    {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            hat[j] = (src[j] - mean) * istd;
            dst[j] = gain.data()[j] * hat[j] + bias.data()[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Backward through layer_norm. Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gain.len();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    for (s, ((dxs, dys), hat)) in dx
        .data_mut()
        .chunks_mut(d)
        .zip(dy.data().chunks(d))
        .zip(cache.xhat.data().chunks(d))
        .enumerate()
    {
        let istd = cache.inv_std[s];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dxhat[j] = dys[j] * gain.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * hat[j];
            dgain.data_mut()[j] += dys[j] * hat[j];
            dbias.data_mut()[j] += dys[j];
        }
        let n = d as f64;
        for j in 0..d {
            dxs[j] = istd * (dxhat[j] - sum_dxhat / n - hat[j] * sum_dxhat_xhat / n);
        }
    }
    (dx, dgain, dbias)
}

// --- linear ---

/// y = x W + b for a matrix of row vectors. Bias optional.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut y = x.matmul(w).expect("linear shape mismatch");
    if let Some(b) = b {
        let d = b.len();
        for row in y.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] += b.data()[j];
            }
        }
    }
    y
}

/// Backward through linear. Returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = dy.matmul(&w.transpose2()).unwrap();
    let dw = x.transpose2().matmul(dy).unwrap();
    let dout = dy.cols();
    let mut db = Tensor::zeros(&[dout]);
    for row in dy.data().chunks(dout) {
        for j in 0..dout {
            db.data_mut()[j] += row[j];
        }
    }
    (dx, dw, db)
}

// --- scaled dot-product attention ---

pub struct AttnCache {
    /// Row-stochastic attention weights, (l_q, l_k).
    pub weights: Tensor,
}

/// Single-head attention over matrices: softmax(q k^T / sqrt(d)) v.
/// With `causal`, position i may only attend to keys 0..=i.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> (Tensor, AttnCache) {
    let d = q.cols();
    assert_eq!(k.cols(), d);
    assert_eq!(k.rows(), v.rows());
    let (lq, lk) = (q.rows(), k.rows());
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Tensor::zeros(&[lq, lk]);
    for i in 0..lq {
        let limit = if causal { (i + 1).min(lk) } else { lk };
        let mut scores = vec![0.0; limit];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..d {
                acc += q.at2(i, c) * k.at2(j, c);
            }
            *s = acc * scale;
        }
        let probs = softmax_slice(&scores);
        weights.row_mut(i)[..limit].copy_from_slice(&probs);
    }
    let out = weights.matmul(v).unwrap();
    (out, AttnCache { weights })
}

/// Backward through [`attend`]. Returns (dq, dk, dv).
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &AttnCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let a = &cache.weights;
    let dv = a.transpose2().matmul(dy).unwrap();
    let da = dy.matmul(&v.transpose2()).unwrap();
    let (lq, lk) = (a.rows(), a.cols());
    let mut ds = Tensor::zeros(&[lq, lk]);
    for i in 0..lq {
        // Masked entries carry zero weight, so the slice backward is exact.
        let row = softmax_backward_slice(a.row(i), da.row(i));
        ds.row_mut(i).copy_from_slice(&row);
    }
    let dq = ds.matmul(k).unwrap().scale(scale);
    let dk = ds.transpose2().matmul(q).unwrap().scale(scale);
    (dq, dk, dv)
}

/// Batched scaled dot-product attention over rank-3 tensors
/// (B, L_q, d) x (B, L_k, d) x (B, L_k, d) -> (B, L_q, d).
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::Shape("scaled_dot_attention expects rank-3 inputs".into()));
    }
    let (b, d) = (q.shape()[0], q.shape()[2]);
    if k.shape()[0] != b || v.shape()[0] != b || k.shape()[2] != d || v.shape()[2] != d
        || k.shape()[1] != v.shape()[1]
    {
        return Err(Error::Shape(format!(
            "scaled_dot_attention {:?} x {:?} x {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut out = Tensor::zeros(&[b, q.shape()[1], d]);
    for i in 0..b {
        let (o, _) = attend(&q.batch(i), &k.batch(i), &v.batch(i), false);
        out.set_batch(i, &o);
    }
    Ok(out)
}

// --- finite differences ---

/// Central-difference gradient of a scalar function of the parameters.
///
/// This is the validation oracle for every hand-written backward pass in
/// the crate. It perturbs one scalar at a time, so it is only meant for
/// tiny models.
pub fn finite_diff_gradient<F>(
    f: F,
    params: &mut ModelParams,
    eps: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ModelParams) -> f64,
{
    assert!((1e-7..=1e-3).contains(&eps), "eps out of the supported range");
    let names: Vec<String> = params.keys().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = params.get(&name).len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = params.get(&name).data()[i];
            params.get_mut(&name).data_mut()[i] = orig + eps;
            let fp = f(params);
            params.get_mut(&name).data_mut()[i] = orig - eps;
            let fm = f(params);
            params.get_mut(&name).data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing {name}[{i}]"
                )));
            }
            grad[i] = (fp - fm) / (2.0 * eps);
        }
        let shape = params.get(&name).shape().to_vec();
        out.insert(name, Tensor::new(&shape, grad)?);
    }
    Ok(out)
}

/// Relative error with an absolute floor, as used by every gradient check.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-8)
}
