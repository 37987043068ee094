//! Multi-task output heads.
//!
//! Two heads share the fused features: a classifier (mean-pool, linear,
//! layer norm, GELU, linear) trained with one-vs-all sigmoid binary
//! cross-entropy, and an auxiliary single-layer autoregressive decoder
//! used only for open-ended training samples. The decoder cross-attends
//! into the fused sequence with keys and values gated by a learnable
//! per-position mask, so the gradient it sends back emphasizes the
//! positions the mask keeps open. The total objective combines the
//! classification, contrastive, and auxiliary losses linearly.

use crate::error::{Error, Result};
use crate::numerics::{
    attend, attend_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, sigmoid, softmax_slice, softplus, AttnCache, LayerNormCache,
};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Token id reserved for the decoder start-of-sequence symbol.
pub const BOS_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionType {
    Closed,
    Open,
}

/// How the classifier turns logits into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossMode {
    /// One-vs-all sigmoid binary cross-entropy (the default reading).
    Bce,
    /// Conventional softmax cross-entropy, kept for comparison.
    SoftmaxCe,
}

pub fn init_classifier_params<R: rand::Rng>(
    params: &mut ModelParams,
    d: usize,
    num_answers: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d as f64).sqrt();
    params.insert("famt.cls.w1", Tensor::randn(&[d, d], std, rng));
    params.insert("famt.cls.b1", Tensor::zeros(&[d]));
    params.insert("famt.cls.ln.gain", Tensor::full(&[d], 1.0));
    params.insert("famt.cls.ln.bias", Tensor::zeros(&[d]));
    params.insert("famt.cls.w2", Tensor::randn(&[d, num_answers], std, rng));
    params.insert("famt.cls.b2", Tensor::zeros(&[num_answers]));
}

pub fn init_aux_params<R: rand::Rng>(
    params: &mut ModelParams,
    d: usize,
    l_f: usize,
    answer_vocab: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d as f64).sqrt();
    params.insert("famt.aux.mask", Tensor::full(&[l_f], 1.0));
    params.insert("famt.aux.tok", Tensor::randn(&[answer_vocab, d], 0.02, rng));
    for block in ["self", "cross"] {
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(
                &format!("famt.aux.{block}.{w}"),
                Tensor::randn(&[d, d], std, rng),
            );
        }
    }
    params.insert("famt.aux.out_w", Tensor::randn(&[d, answer_vocab], std, rng));
    params.insert("famt.aux.out_b", Tensor::zeros(&[answer_vocab]));
}

pub struct ClassifyCache {
    pub x_f: Tensor,
    pub pooled: Tensor,
    pub h1: Tensor,
    pub ln_out: Tensor,
    pub ln_cache: LayerNormCache,
    pub act: Tensor,
}

/// Classification head over the fused batch (B, L_f, d); returns raw
/// logits (B, |A|).
pub fn classify(params: &ModelParams, x_f: &Tensor) -> Result<(Tensor, ClassifyCache)> {
    if x_f.rank() != 3 {
        return Err(Error::Shape(format!(
            "classify expects (B, L, d), got {:?}",
            x_f.shape()
        )));
    }
    if !x_f.all_finite() {
        return Err(Error::Numeric("non-finite fused features".into()));
    }
    let (b, d) = (x_f.shape()[0], x_f.shape()[2]);
    let mut pooled = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let m = x_f.batch(i);
        pooled.row_mut(i).copy_from_slice(m.mean_rows().data());
    }
    let h1 = linear(&pooled, params.get("famt.cls.w1"), Some(params.get("famt.cls.b1")));
    let (ln_out, ln_cache) = layer_norm(&h1, params.get("famt.cls.ln.gain"), params.get("famt.cls.ln.bias"));
    let act = gelu(&ln_out);
    let logits = linear(&act, params.get("famt.cls.w2"), Some(params.get("famt.cls.b2")));
    Ok((
        logits,
        ClassifyCache { x_f: x_f.clone(), pooled, h1, ln_out, ln_cache, act },
    ))
}

/// Backward of [`classify`]; returns the gradient on the fused batch.
pub fn classify_backward(
    params: &mut ModelParams,
    cache: &ClassifyCache,
    dlogits: &Tensor,
) -> Tensor {
    let w2 = params.get("famt.cls.w2").clone();
    let (dact, dw2, db2) = linear_backward(&cache.act, &w2, dlogits);
    params.accumulate("famt.cls.w2", &dw2);
    params.accumulate("famt.cls.b2", &db2);
    let dln = gelu_backward(&cache.ln_out, &dact);
    let gain = params.get("famt.cls.ln.gain").clone();
    let (dh1, dgain, dbias) = layer_norm_backward(&cache.ln_cache, &gain, &dln);
    params.accumulate("famt.cls.ln.gain", &dgain);
    params.accumulate("famt.cls.ln.bias", &dbias);
    let w1 = params.get("famt.cls.w1").clone();
    let (dpooled, dw1, db1) = linear_backward(&cache.pooled, &w1, &dh1);
    params.accumulate("famt.cls.w1", &dw1);
    params.accumulate("famt.cls.b1", &db1);
    let (b, l, d) = (
        cache.x_f.shape()[0],
        cache.x_f.shape()[1],
        cache.x_f.shape()[2],
    );
    let mut dx = Tensor::zeros(cache.x_f.shape());
    for i in 0..b {
        for r in 0..l {
            for c in 0..d {
                dx.data_mut()[(i * l + r) * d + c] = dpooled.at2(i, c) / l as f64;
            }
        }
    }
    dx
}

/// Loss over raw logits (B, |A|) against index targets.
pub fn classification_loss(
    logits: &Tensor,
    answers: &[usize],
    mode: ClassLossMode,
) -> Result<f64> {
    let (b, a) = (logits.rows(), logits.cols());
    if answers.len() != b {
        return Err(Error::Shape("answer count does not match batch".into()));
    }
    let mut total = 0.0;
    for (i, &ans) in answers.iter().enumerate() {
        if ans >= a {
            return Err(Error::Input(format!("answer index {ans} out of range ({a})")));
        }
        match mode {
            ClassLossMode::Bce => {
                let mut sample = 0.0;
                for j in 0..a {
                    let x = logits.at2(i, j);
                    let y = if j == ans { 1.0 } else { 0.0 };
                    sample += softplus(x) - y * x;
                }
                total += sample / a as f64;
            }
            ClassLossMode::SoftmaxCe => {
                let p = softmax_slice(logits.row(i));
                total += -p[ans].max(1e-300).ln();
            }
        }
    }
    Ok(total / b as f64)
}

/// Gradient of [`classification_loss`] with respect to the logits.
pub fn classification_loss_backward(
    logits: &Tensor,
    answers: &[usize],
    mode: ClassLossMode,
) -> Tensor {
    let (b, a) = (logits.rows(), logits.cols());
    let mut d = Tensor::zeros(logits.shape());
    for (i, &ans) in answers.iter().enumerate() {
        match mode {
            ClassLossMode::Bce => {
                for j in 0..a {
                    let y = if j == ans { 1.0 } else { 0.0 };
                    *d.at2_mut(i, j) = (sigmoid(logits.at2(i, j)) - y) / (a * b) as f64;
                }
            }
            ClassLossMode::SoftmaxCe => {
                let p = softmax_slice(logits.row(i));
                for j in 0..a {
                    let y = if j == ans { 1.0 } else { 0.0 };
                    *d.at2_mut(i, j) = (p[j] - y) / b as f64;
                }
            }
        }
    }
    d
}

struct AuxSampleCache {
    batch_index: usize,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    e: Tensor,
    sq: Tensor,
    sk: Tensor,
    sv: Tensor,
    s_attn: AttnCache,
    s_out: Tensor,
    h: Tensor,
    kv_in: Tensor,
    cq: Tensor,
    ck: Tensor,
    cv: Tensor,
    c_attn: AttnCache,
    c_out: Tensor,
    h2: Tensor,
    probs: Tensor,
}

pub struct AuxCache {
    samples: Vec<AuxSampleCache>,
    x_f_shape: Vec<usize>,
    num_open: usize,
}

/// Auxiliary decoder loss over the open-ended slice of the batch.
///
/// For each open sample the decoder sees the target shifted right behind a
/// start token, self-attends causally, cross-attends into the fused
/// sequence whose keys and values are scaled by sigmoid(mask), and is
/// scored with teacher-forced next-token cross-entropy. Closed samples are
/// skipped entirely; an all-closed batch yields exactly zero loss and no
/// gradient.
pub fn aux_loss(
    params: &ModelParams,
    x_f: &Tensor,
    qtypes: &[QuestionType],
    answers: &[Vec<usize>],
) -> Result<(f64, AuxCache)> {
    if x_f.rank() != 3 {
        return Err(Error::Shape(format!(
            "aux_loss expects (B, L, d), got {:?}",
            x_f.shape()
        )));
    }
    let b = x_f.shape()[0];
    if qtypes.len() != b || answers.len() != b {
        return Err(Error::Shape("qtypes/answers do not match batch".into()));
    }
    let l_f = x_f.shape()[1];
    let mask = params.get("famt.aux.mask");
    if mask.len() != l_f {
        return Err(Error::Shape(format!(
            "mask length {} does not match fused length {l_f}",
            mask.len()
        )));
    }
    let tok = params.get("famt.aux.tok");
    let d = x_f.shape()[2];
    let vocab = tok.rows();
    let mut samples = Vec::new();
    let mut total = 0.0;
    for i in 0..b {
        if qtypes[i] != QuestionType::Open {
            continue;
        }
        if answers[i].is_empty() {
            return Err(Error::Input(format!(
                "open-ended sample {i} has no answer tokens"
            )));
        }
        let targets = answers[i].clone();
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let t = inputs.len();
        let mut e = Tensor::zeros(&[t, d]);
        for (r, &id) in inputs.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Input(format!("answer token {id} out of range ({vocab})")));
            }
            e.row_mut(r).copy_from_slice(tok.row(id));
        }
        let sq = e.matmul(params.get("famt.aux.self.wq"))?;
        let sk = e.matmul(params.get("famt.aux.self.wk"))?;
        let sv = e.matmul(params.get("famt.aux.self.wv"))?;
        let (s_raw, s_attn) = attend(&sq, &sk, &sv, true);
        let s_out = s_raw.matmul(params.get("famt.aux.self.wo"))?;
        let h = e.add(&s_out)?;

        let mut kv_in = x_f.batch(i);
        for (r, row) in kv_in.data_mut().chunks_mut(d).enumerate() {
            let g = sigmoid(mask.data()[r]);
            for v in row.iter_mut() {
                *v *= g;
            }
        }
        let cq = h.matmul(params.get("famt.aux.cross.wq"))?;
        let ck = kv_in.matmul(params.get("famt.aux.cross.wk"))?;
        let cv = kv_in.matmul(params.get("famt.aux.cross.wv"))?;
        let (c_raw, c_attn) = attend(&cq, &ck, &cv, false);
        let c_out = c_raw.matmul(params.get("famt.aux.cross.wo"))?;
        let h2 = h.add(&c_out)?;
        let logits = linear(&h2, params.get("famt.aux.out_w"), Some(params.get("famt.aux.out_b")));
        let mut probs = Tensor::zeros(logits.shape());
        let mut sample_loss = 0.0;
        for r in 0..t {
            let p = softmax_slice(logits.row(r));
            sample_loss += -p[targets[r]].max(1e-300).ln();
            probs.row_mut(r).copy_from_slice(&p);
        }
        total += sample_loss / t as f64;
        samples.push(AuxSampleCache {
            batch_index: i,
            inputs,
            targets,
            e,
            sq,
            sk,
            sv,
            s_attn,
            s_out: s_raw,
            h,
            kv_in,
            cq,
            ck,
            cv,
            c_attn,
            c_out: c_raw,
            h2,
            probs,
        });
    }
    let num_open = samples.len();
    let loss = if num_open == 0 { 0.0 } else { total / num_open as f64 };
    Ok((
        loss,
        AuxCache { samples, x_f_shape: x_f.shape().to_vec(), num_open },
    ))
}

/// Backward of [`aux_loss`] scaled by `g`; returns the gradient on the
/// fused batch (zero rows for closed samples).
pub fn aux_loss_backward(params: &mut ModelParams, cache: &AuxCache, g: f64) -> Tensor {
    let mut dx_f = Tensor::zeros(&cache.x_f_shape);
    if cache.num_open == 0 {
        return dx_f;
    }
    let d = cache.x_f_shape[2];
    let l_f = cache.x_f_shape[1];
    let mask = params.get("famt.aux.mask").clone();
    let scale = g / cache.num_open as f64;
    for s in &cache.samples {
        let t = s.inputs.len();
        let mut dlogits = s.probs.clone();
        for r in 0..t {
            *dlogits.at2_mut(r, s.targets[r]) -= 1.0;
        }
        for v in dlogits.data_mut() {
            *v *= scale / t as f64;
        }
        let out_w = params.get("famt.aux.out_w").clone();
        let (dh2, dout_w, dout_b) = linear_backward(&s.h2, &out_w, &dlogits);
        params.accumulate("famt.aux.out_w", &dout_w);
        params.accumulate("famt.aux.out_b", &dout_b);

        let wo_c = params.get("famt.aux.cross.wo").clone();
        let (dc_raw, dwo_c, _) = linear_backward(&s.c_out, &wo_c, &dh2);
        params.accumulate("famt.aux.cross.wo", &dwo_c);
        let (dcq, dck, dcv) = attend_backward(&s.cq, &s.ck, &s.cv, &s.c_attn, &dc_raw);
        let wq_c = params.get("famt.aux.cross.wq").clone();
        let (dh_cross, dwq_c, _) = linear_backward(&s.h, &wq_c, &dcq);
        params.accumulate("famt.aux.cross.wq", &dwq_c);
        let wk_c = params.get("famt.aux.cross.wk").clone();
        let (dkv_k, dwk_c, _) = linear_backward(&s.kv_in, &wk_c, &dck);
        params.accumulate("famt.aux.cross.wk", &dwk_c);
        let wv_c = params.get("famt.aux.cross.wv").clone();
        let (dkv_v, dwv_c, _) = linear_backward(&s.kv_in, &wv_c, &dcv);
        params.accumulate("famt.aux.cross.wv", &dwv_c);
        let mut dkv = dkv_k;
        dkv.add_assign(&dkv_v);
        // gate: kv_in = sigmoid(mask_r) * x_f_row
        let mut dmask = Tensor::zeros(&[l_f]);
        for r in 0..l_f {
            let gm = sigmoid(mask.data()[r]);
            let mut along = 0.0;
            for c in 0..d {
                let dv = dkv.at2(r, c);
                // x_f row recovered from the gated copy
                let x_val = if gm != 0.0 { s.kv_in.at2(r, c) / gm } else { 0.0 };
                along += dv * x_val;
                dx_f.data_mut()[(s.batch_index * l_f + r) * d + c] += dv * gm;
            }
            dmask.data_mut()[r] += along * gm * (1.0 - gm);
        }
        params.accumulate("famt.aux.mask", &dmask);

        let mut dh = dh2;
        dh.add_assign(&dh_cross);
        let wo_s = params.get("famt.aux.self.wo").clone();
        let (ds_raw, dwo_s, _) = linear_backward(&s.s_out, &wo_s, &dh);
        params.accumulate("famt.aux.self.wo", &dwo_s);
        let (dsq, dsk, dsv) = attend_backward(&s.sq, &s.sk, &s.sv, &s.s_attn, &ds_raw);
        let mut de = dh.clone();
        for (name, dproj) in [("wq", &dsq), ("wk", &dsk), ("wv", &dsv)] {
            let w = params.get(&format!("famt.aux.self.{name}")).clone();
            let (de_part, dw, _) = linear_backward(&s.e, &w, dproj);
            params.accumulate(&format!("famt.aux.self.{name}"), &dw);
            de.add_assign(&de_part);
        }
        let mut dtok = Tensor::zeros(params.get("famt.aux.tok").shape());
        for (r, &id) in s.inputs.iter().enumerate() {
            for c in 0..d {
                dtok.data_mut()[id * d + c] += de.at2(r, c);
            }
        }
        params.accumulate("famt.aux.tok", &dtok);
    }
    dx_f
}

/// L = L_cls + alpha L_vtc + beta L_aux.
pub fn total_loss(l_cls: f64, l_vtc: f64, l_aux: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(l_cls + alpha * l_vtc + beta * l_aux)
}

/// Argmax over one logit row; ties break toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
