//! Fine-grained cross-modal feature alignment.
//!
//! A stack (default depth 1) of question-aware query blocks: learnable
//! queries self-attend with the question tokens prepended to the key/value
//! sequence, cross-attend into the visual features, and pass through a
//! two-layer GELU MLP. Each sub-layer is wrapped in a pre-norm residual
//! (`x + F(LN(x))`); a config knob drops the residual/norm wrapping so the
//! bare equations remain testable. Alignment is trained with a symmetric
//! InfoNCE-style contrastive loss over max-of-cosine query/text similarity.

use crate::error::{Error, Result};
use crate::numerics::{
    attend, attend_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_slice, AttnCache, LayerNormCache,
};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityReduce {
    /// Max over the query vectors of cosine similarity (default).
    Max,
    /// Mean over the query vectors.
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignConfig {
    pub layers: usize,
    /// Wrap each sub-layer in `x + F(LN(x))`. Off reproduces the bare
    /// equation stack.
    pub residual_norm: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { layers: 1, residual_norm: true }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub reduce: SimilarityReduce,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.07, reduce: SimilarityReduce::Max }
    }
}

pub fn init_params<R: rand::Rng>(
    params: &mut ModelParams,
    d: usize,
    l_q: usize,
    layers: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d as f64).sqrt();
    params.insert("align.queries", Tensor::randn(&[l_q, d], 0.02, rng));
    for l in 0..layers {
        for block in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("align.l{l}.{block}.{w}"), Tensor::randn(&[d, d], std, rng));
            }
        }
        params.insert(&format!("align.l{l}.mlp.w1"), Tensor::randn(&[d, d], std, rng));
        params.insert(&format!("align.l{l}.mlp.b1"), Tensor::zeros(&[d]));
        params.insert(&format!("align.l{l}.mlp.w2"), Tensor::randn(&[d, d], std, rng));
        params.insert(&format!("align.l{l}.mlp.b2"), Tensor::zeros(&[d]));
        for ln in ["ln1", "ln2", "ln3"] {
            params.insert(&format!("align.l{l}.{ln}.gain"), Tensor::full(&[d], 1.0));
            params.insert(&format!("align.l{l}.{ln}.bias"), Tensor::zeros(&[d]));
        }
    }
}

struct SubLayerCache {
    ln: Option<LayerNormCache>,
    normed: Tensor,
}

struct AttnSubCache {
    pre: SubLayerCache,
    kv_src: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: AttnCache,
    attn_out: Tensor,
}

struct MlpSubCache {
    pre: SubLayerCache,
    pre_act: Tensor,
    hidden: Tensor,
}

struct LayerCache {
    self_attn: AttnSubCache,
    cross_attn: AttnSubCache,
    mlp: MlpSubCache,
}

pub struct QqFormerCache {
    layers: Vec<Vec<LayerCache>>, // [batch][layer]
    batch: usize,
}

fn sublayer_pre(
    params: &ModelParams,
    prefix: &str,
    x: &Tensor,
    residual_norm: bool,
) -> SubLayerCache {
    if residual_norm {
        let (normed, ln) = layer_norm(
            x,
            params.get(&format!("{prefix}.gain")),
            params.get(&format!("{prefix}.bias")),
        );
        SubLayerCache { ln: Some(ln), normed }
    } else {
        SubLayerCache { ln: None, normed: x.clone() }
    }
}

fn vstack(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols());
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&[a.rows() + b.rows(), a.cols()], data).unwrap()
}

/// Forward pass over a batch. `t_seq` (B, L_t, d) are the question token
/// features, `v_seq` (B, L_v, d) the visual token features. Returns the
/// aligned query outputs (B, L_q, d).
pub fn qqformer_forward(
    params: &ModelParams,
    cfg: &AlignConfig,
    t_seq: &Tensor,
    v_seq: &Tensor,
) -> Result<(Tensor, QqFormerCache)> {
    if t_seq.rank() != 3 || v_seq.rank() != 3 {
        return Err(Error::Shape("qqformer expects rank-3 feature batches".into()));
    }
    let d = t_seq.shape()[2];
    if v_seq.shape()[2] != d || v_seq.shape()[0] != t_seq.shape()[0] {
        return Err(Error::Shape(format!(
            "qqformer text {:?} vs visual {:?}",
            t_seq.shape(),
            v_seq.shape()
        )));
    }
    let b = t_seq.shape()[0];
    let queries = params.get("align.queries");
    let mut outs = Vec::with_capacity(b);
    let mut caches = Vec::with_capacity(b);
    for i in 0..b {
        let t = t_seq.batch(i);
        let v = v_seq.batch(i);
        let mut x = queries.clone();
        let mut layer_caches = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            // self-attention with text prepended to keys/values
            let pre = sublayer_pre(params, &format!("align.l{l}.ln1"), &x, cfg.residual_norm);
            let kv_src = vstack(&t, &pre.normed);
            let q = pre.normed.matmul(params.get(&format!("align.l{l}.self.wq")))?;
            let k = kv_src.matmul(params.get(&format!("align.l{l}.self.wk")))?;
            let vv = kv_src.matmul(params.get(&format!("align.l{l}.self.wv")))?;
            let (attn_out, attn) = attend(&q, &k, &vv, false);
            let o = attn_out.matmul(params.get(&format!("align.l{l}.self.wo")))?;
            let x_self = if cfg.residual_norm { x.add(&o)? } else { o };
            let self_cache = AttnSubCache { pre, kv_src, q, k, v: vv, attn, attn_out };

            // cross-attention into the visual features
            let pre = sublayer_pre(params, &format!("align.l{l}.ln2"), &x_self, cfg.residual_norm);
            let q = pre.normed.matmul(params.get(&format!("align.l{l}.cross.wq")))?;
            let k = v.matmul(params.get(&format!("align.l{l}.cross.wk")))?;
            let vv = v.matmul(params.get(&format!("align.l{l}.cross.wv")))?;
            let (attn_out, attn) = attend(&q, &k, &vv, false);
            let o = attn_out.matmul(params.get(&format!("align.l{l}.cross.wo")))?;
            let x_cross = if cfg.residual_norm { x_self.add(&o)? } else { o };
            let cross_cache = AttnSubCache { pre, kv_src: v.clone(), q, k, v: vv, attn, attn_out };

            // two-layer GELU MLP
            let pre = sublayer_pre(params, &format!("align.l{l}.ln3"), &x_cross, cfg.residual_norm);
            let pre_act = linear(
                &pre.normed,
                params.get(&format!("align.l{l}.mlp.w1")),
                Some(params.get(&format!("align.l{l}.mlp.b1"))),
            );
            let hidden = gelu(&pre_act);
            let h = linear(
                &hidden,
                params.get(&format!("align.l{l}.mlp.w2")),
                Some(params.get(&format!("align.l{l}.mlp.b2"))),
            );
            x = if cfg.residual_norm { x_cross.add(&h)? } else { h };
            layer_caches.push(LayerCache {
                self_attn: self_cache,
                cross_attn: cross_cache,
                mlp: MlpSubCache { pre, pre_act, hidden },
            });
        }
        outs.push(x);
        caches.push(layer_caches);
    }
    Ok((Tensor::stack(&outs), QqFormerCache { layers: caches, batch: b }))
}

fn sublayer_pre_backward(
    params: &mut ModelParams,
    prefix: &str,
    cache: &SubLayerCache,
    d_normed: &Tensor,
) -> Tensor {
    match &cache.ln {
        Some(ln) => {
            let gain = params.get(&format!("{prefix}.gain")).clone();
            let (dx, dgain, dbias) = layer_norm_backward(ln, &gain, d_normed);
            params.accumulate(&format!("{prefix}.gain"), &dgain);
            params.accumulate(&format!("{prefix}.bias"), &dbias);
            dx
        }
        None => d_normed.clone(),
    }
}

/// Backward through [`qqformer_forward`]. Accumulates all parameter grads
/// (including the queries). Input features are frozen upstream, so their
/// gradients are not materialized.
pub fn qqformer_backward(
    params: &mut ModelParams,
    cfg: &AlignConfig,
    cache: &QqFormerCache,
    d_out: &Tensor,
) {
    let l_q = params.get("align.queries").rows();
    for i in 0..cache.batch {
        let mut dx = d_out.batch(i);
        for l in (0..cfg.layers).rev() {
            let lc = &cache.layers[i][l];

            // MLP sub-layer
            let (d_cross_res, dh) = if cfg.residual_norm {
                (dx.clone(), dx.clone())
            } else {
                (Tensor::zeros(dx.shape()), dx.clone())
            };
            let w2 = params.get(&format!("align.l{l}.mlp.w2")).clone();
            let (dhidden, dw2, db2) = linear_backward(&lc.mlp.hidden, &w2, &dh);
            params.accumulate(&format!("align.l{l}.mlp.w2"), &dw2);
            params.accumulate(&format!("align.l{l}.mlp.b2"), &db2);
            let dpre_act = gelu_backward(&lc.mlp.pre_act, &dhidden);
            let w1 = params.get(&format!("align.l{l}.mlp.w1")).clone();
            let (dnormed, dw1, db1) = linear_backward(&lc.mlp.pre.normed, &w1, &dpre_act);
            params.accumulate(&format!("align.l{l}.mlp.w1"), &dw1);
            params.accumulate(&format!("align.l{l}.mlp.b1"), &db1);
            let mut d_x_cross =
                sublayer_pre_backward(params, &format!("align.l{l}.ln3"), &lc.mlp.pre, &dnormed);
            d_x_cross.add_assign(&d_cross_res);

            // cross-attention sub-layer (keys/values from frozen visual
            // features: their input grads are dropped, projections kept)
            let (d_self_res, do_cross) = if cfg.residual_norm {
                (d_x_cross.clone(), d_x_cross.clone())
            } else {
                (Tensor::zeros(d_x_cross.shape()), d_x_cross.clone())
            };
            let wo = params.get(&format!("align.l{l}.cross.wo")).clone();
            let (d_attn_out, dwo, _) = linear_backward(&lc.cross_attn.attn_out, &wo, &do_cross);
            params.accumulate(&format!("align.l{l}.cross.wo"), &dwo);
            let (dq, dk, dv) = attend_backward(
                &lc.cross_attn.q,
                &lc.cross_attn.k,
                &lc.cross_attn.v,
                &lc.cross_attn.attn,
                &d_attn_out,
            );
            let wq = params.get(&format!("align.l{l}.cross.wq")).clone();
            let (dnormed, dwq, _) = linear_backward(&lc.cross_attn.pre.normed, &wq, &dq);
            params.accumulate(&format!("align.l{l}.cross.wq"), &dwq);
            let wk = params.get(&format!("align.l{l}.cross.wk")).clone();
            let (_, dwk, _) = linear_backward(&lc.cross_attn.kv_src, &wk, &dk);
            params.accumulate(&format!("align.l{l}.cross.wk"), &dwk);
            let wv = params.get(&format!("align.l{l}.cross.wv")).clone();
            let (_, dwv, _) = linear_backward(&lc.cross_attn.kv_src, &wv, &dv);
            params.accumulate(&format!("align.l{l}.cross.wv"), &dwv);
            let mut d_x_self =
                sublayer_pre_backward(params, &format!("align.l{l}.ln2"), &lc.cross_attn.pre, &dnormed);
            d_x_self.add_assign(&d_self_res);

            // self-attention sub-layer: keys/values are [text; queries],
            // so the trailing L_q rows of the kv grads flow back into the
            // normed queries as well.
            let (d_x_res, do_self) = if cfg.residual_norm {
                (d_x_self.clone(), d_x_self.clone())
            } else {
                (Tensor::zeros(d_x_self.shape()), d_x_self.clone())
            };
            let wo = params.get(&format!("align.l{l}.self.wo")).clone();
            let (d_attn_out, dwo, _) = linear_backward(&lc.self_attn.attn_out, &wo, &do_self);
            params.accumulate(&format!("align.l{l}.self.wo"), &dwo);
            let (dq, dk, dv) = attend_backward(
                &lc.self_attn.q,
                &lc.self_attn.k,
                &lc.self_attn.v,
                &lc.self_attn.attn,
                &d_attn_out,
            );
            let wq = params.get(&format!("align.l{l}.self.wq")).clone();
            let (mut dnormed, dwq, _) = linear_backward(&lc.self_attn.pre.normed, &wq, &dq);
            params.accumulate(&format!("align.l{l}.self.wq"), &dwq);
            let wk = params.get(&format!("align.l{l}.self.wk")).clone();
            let (dkv_k, dwk, _) = linear_backward(&lc.self_attn.kv_src, &wk, &dk);
            params.accumulate(&format!("align.l{l}.self.wk"), &dwk);
            let wv = params.get(&format!("align.l{l}.self.wv")).clone();
            let (dkv_v, dwv, _) = linear_backward(&lc.self_attn.kv_src, &wv, &dv);
            params.accumulate(&format!("align.l{l}.self.wv"), &dwv);
            let kv_rows = lc.self_attn.kv_src.rows();
            let text_rows = kv_rows - l_q;
            for r in 0..l_q {
                for c in 0..dnormed.cols() {
                    *dnormed.at2_mut(r, c) +=
                        dkv_k.at2(text_rows + r, c) + dkv_v.at2(text_rows + r, c);
                }
            }
            let d_x = sublayer_pre_backward(params, &format!("align.l{l}.ln1"), &lc.self_attn.pre, &dnormed);
            dx = d_x;
            dx.add_assign(&d_x_res);
        }
        params.accumulate("align.queries", &dx);
    }
}

// --- similarity and contrastive loss ---

pub struct SimCache {
    /// Per-query cosine values.
    pub cosines: Vec<f64>,
    pub argmax: usize,
}

/// Reduce the query block against a single text vector: max (or mean) of
/// per-query cosine similarity. Result lies in [-1, 1].
pub fn pair_similarity(
    queries: &Tensor,
    text: &[f64],
    reduce: SimilarityReduce,
) -> Result<(f64, SimCache)> {
    let d = queries.cols();
    assert_eq!(text.len(), d);
    let t_norm = text.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm == 0.0 {
        return Err(Error::Numeric("zero-norm text vector".into()));
    }
    let mut cosines = Vec::with_capacity(queries.rows());
    for r in 0..queries.rows() {
        let row = queries.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Numeric(format!("zero-norm query vector at index {r}")));
        }
        let dot: f64 = row.iter().zip(text).map(|(a, b)| a * b).sum();
        cosines.push(dot / (n * t_norm));
    }
    let (sim, argmax) = match reduce {
        SimilarityReduce::Max => {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, &c) in cosines.iter().enumerate() {
                if c > best.1 {
                    best = (i, c);
                }
            }
            (best.1, best.0)
        }
        SimilarityReduce::Mean => {
            (cosines.iter().sum::<f64>() / cosines.len() as f64, 0)
        }
    };
    Ok((sim, SimCache { cosines, argmax }))
}

/// d(cos(u,t))/du added into `du` with weight `g`.
fn cosine_backward_u(u: &[f64], t: &[f64], cos: f64, g: f64, du: &mut [f64]) {
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..u.len() {
        du[i] += g * (t[i] / (un * tn) - cos * u[i] / (un * un));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLosses {
    pub vtc: f64,
    pub v2t: f64,
    pub t2v: f64,
}

pub struct ContrastiveCache {
    sims: Vec<Vec<SimCache>>, // [i][j]
    s: Tensor,                // similarity matrix
    row_p: Tensor,
    col_p: Tensor,
}

/// Bidirectional contrastive loss over a batch. `z_f` is (B, L_q, d), the
/// text summaries are (B, d). The visual-to-text term is a per-row softmax
/// cross entropy over the similarity matrix scaled by the temperature, the
/// text-to-visual term uses the columns, and the combined loss is their
/// average. Sums run over the batch.
pub fn contrastive_loss(
    z_f: &Tensor,
    t_summaries: &Tensor,
    cfg: &ContrastiveConfig,
) -> Result<(ContrastiveLosses, ContrastiveCache)> {
    if cfg.temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let b = z_f.shape()[0];
    if t_summaries.shape()[0] != b {
        return Err(Error::Shape("batch mismatch between queries and text".into()));
    }
    let mut s = Tensor::zeros(&[b, b]);
    let mut sims = Vec::with_capacity(b);
    for i in 0..b {
        let qi = z_f.batch(i);
        let mut row = Vec::with_capacity(b);
        for j in 0..b {
            let (v, cache) = pair_similarity(&qi, t_summaries.row(j), cfg.reduce)?;
            *s.at2_mut(i, j) = v;
            row.push(cache);
        }
        sims.push(row);
    }
    let tau = cfg.temperature;
    let mut v2t = 0.0;
    let mut row_p = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| s.at2(i, j) / tau).collect();
        let p = softmax_slice(&logits);
        v2t -= p[i].ln();
        row_p.row_mut(i).copy_from_slice(&p);
    }
    let mut t2v = 0.0;
    let mut col_p = Tensor::zeros(&[b, b]);
    for j in 0..b {
        let logits: Vec<f64> = (0..b).map(|i| s.at2(i, j) / tau).collect();
        let p = softmax_slice(&logits);
        t2v -= p[j].ln();
        for i in 0..b {
            *col_p.at2_mut(i, j) = p[i];
        }
    }
    let losses = ContrastiveLosses { vtc: 0.5 * (v2t + t2v), v2t, t2v };
    Ok((losses, ContrastiveCache { sims, s, row_p, col_p }))
}

/// Backward of the combined loss (scaled by `g`) with respect to `z_f`.
/// Text summaries are frozen encoder outputs, so their grads are dropped.
pub fn contrastive_backward(
    z_f: &Tensor,
    t_summaries: &Tensor,
    cfg: &ContrastiveConfig,
    cache: &ContrastiveCache,
    g: f64,
) -> Tensor {
    let b = z_f.shape()[0];
    let tau = cfg.temperature;
    let mut d_zf = Tensor::zeros(z_f.shape());
    let l_q = z_f.shape()[1];
    let d = z_f.shape()[2];
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            let ds = g * 0.5 / tau
                * ((cache.row_p.at2(i, j) - delta) + (cache.col_p.at2(i, j) - delta));
            if ds == 0.0 {
                continue;
            }
            let sim = &cache.sims[i][j];
            let start = i * l_q * d;
            match cfg.reduce {
                SimilarityReduce::Max => {
                    let r = sim.argmax;
                    let u: Vec<f64> = z_f.data()[start + r * d..start + (r + 1) * d].to_vec();
                    let du = &mut d_zf.data_mut()[start + r * d..start + (r + 1) * d];
                    cosine_backward_u(&u, t_summaries.row(j), sim.cosines[r], ds, du);
                }
                SimilarityReduce::Mean => {
                    let w = ds / l_q as f64;
                    for r in 0..l_q {
                        let u: Vec<f64> = z_f.data()[start + r * d..start + (r + 1) * d].to_vec();
                        let du = &mut d_zf.data_mut()[start + r * d..start + (r + 1) * d];
                        cosine_backward_u(&u, t_summaries.row(j), sim.cosines[r], w, du);
                    }
                }
            }
        }
    }
    d_zf
}

#[allow(unused)]
pub fn similarity_matrix(cache: &ContrastiveCache) -> &Tensor {
    &cache.s
}
