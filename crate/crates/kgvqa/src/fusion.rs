//! Cross-modal interaction via selective state-space scans.
//!
//! The core kernel is a per-channel diagonal SSM whose discretization step,
//! input and output projections are computed per position from a
//! conditioning stream (the selective mechanism). A cross-modal unit runs
//! the scan over one modality conditioned on its elementwise product with
//! the (mean-pooled, broadcast) other modality, gates the result, applies a
//! linear fusion map, and adds the residual. Two stacked blocks of four
//! such units produce the streams combined by the tripartite fusion.
//!
//! The module also carries the analytic multiply-accumulate model used by
//! the complexity benchmark: the scan path is linear in sequence length
//! while the attention baseline is quadratic.

use crate::error::{Error, Result};
use crate::numerics::{linear_backward, sigmoid, softplus};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Weight factors of the tripartite fusion.
#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub eta: f64,
    pub theta: f64,
}

impl FusionWeights {
    pub fn new(eta: f64, theta: f64) -> Result<Self> {
        if eta < 0.0 || theta < 0.0 {
            return Err(Error::Config(format!(
                "fusion weights must be nonnegative, got eta={eta} theta={theta}"
            )));
        }
        Ok(Self { eta, theta })
    }
}

/// Parameter keys of one cross-modal unit, under a caller-chosen prefix.
pub fn init_unit_params<R: rand::Rng>(
    params: &mut ModelParams,
    prefix: &str,
    d: usize,
    n: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d as f64).sqrt();
    params.insert(&format!("{prefix}.w_delta"), Tensor::randn(&[d, d], std, rng));
    // softplus(-4.6) is about 0.01: small initial step keeps decays close to 1
    params.insert(&format!("{prefix}.b_delta"), Tensor::full(&[d], -4.6));
    params.insert(&format!("{prefix}.w_b"), Tensor::randn(&[d, n], std, rng));
    params.insert(&format!("{prefix}.w_c"), Tensor::randn(&[d, n], std, rng));
    // A = -exp(a_log); staggered decays per state dimension
    let mut a_log = Tensor::zeros(&[d, n]);
    for c in 0..d {
        for s in 0..n {
            a_log.data_mut()[c * n + s] = ((s + 1) as f64).ln();
        }
    }
    params.insert(&format!("{prefix}.a_log"), a_log);
    params.insert(&format!("{prefix}.d_skip"), Tensor::full(&[d], 1.0));
    params.insert(&format!("{prefix}.w_gate"), Tensor::randn(&[d, d], std, rng));
    params.insert(&format!("{prefix}.b_gate"), Tensor::zeros(&[d]));
    params.insert(&format!("{prefix}.fus_w"), Tensor::randn(&[d, d], 0.02, rng));
    params.insert(&format!("{prefix}.fus_b"), Tensor::zeros(&[d]));
}

pub struct ScanCache {
    pub u: Tensor,
    pub cond: Tensor,
    pub delta_pre: Tensor, // cond W_delta + b, before softplus, (L, d)
    pub delta: Tensor,     // (L, d)
    pub b_in: Tensor,      // (L, n)
    pub c_out: Tensor,     // (L, n)
    pub states: Vec<Tensor>, // h after each step, (d, n)
}

/// Selective scan over one sequence (L, d) with conditioning (L, d).
///
/// Per channel c and state s:
///   h_l = exp(delta_l A) h_{l-1} + delta_l B_l u_l
///   y_l = C_l . h_l + D u_l
/// with delta, B, C projected from the conditioning stream and
/// delta positive through softplus. Work is O(L d n).
pub fn selective_scan(
    params: &ModelParams,
    prefix: &str,
    u: &Tensor,
    cond: &Tensor,
) -> Result<(Tensor, ScanCache)> {
    if u.shape() != cond.shape() || u.rank() != 2 {
        return Err(Error::Shape(format!(
            "selective_scan u {:?} vs cond {:?}",
            u.shape(),
            cond.shape()
        )));
    }
    let (l_len, d) = (u.rows(), u.cols());
    let w_delta = params.get(&format!("{prefix}.w_delta"));
    let b_delta = params.get(&format!("{prefix}.b_delta"));
    let w_b = params.get(&format!("{prefix}.w_b"));
    let w_c = params.get(&format!("{prefix}.w_c"));
    let a_log = params.get(&format!("{prefix}.a_log"));
    let d_skip = params.get(&format!("{prefix}.d_skip"));
    let n = w_b.cols();

    let mut delta_pre = cond.matmul(w_delta)?;
    for row in delta_pre.data_mut().chunks_mut(d) {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b_delta.data()[j];
        }
    }
    let mut delta = delta_pre.clone();
    for v in delta.data_mut() {
        *v = softplus(*v);
    }
    let b_in = cond.matmul(w_b)?;
    let c_out = cond.matmul(w_c)?;

    let mut y = Tensor::zeros(&[l_len, d]);
    let mut h = Tensor::zeros(&[d, n]);
    let mut states = Vec::with_capacity(l_len);
    for l in 0..l_len {
        for c in 0..d {
            let dt = delta.at2(l, c);
            let uv = u.at2(l, c);
            let mut out = d_skip.data()[c] * uv;
            for s in 0..n {
                let a = -a_log.at2(c, s).exp();
                let decay = (dt * a).exp();
                let hv = decay * h.at2(c, s) + dt * b_in.at2(l, s) * uv;
                *h.at2_mut(c, s) = hv;
                out += c_out.at2(l, s) * hv;
            }
            *y.at2_mut(l, c) = out;
            if !y.at2(l, c).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite scan state at step {l}, channel {c}"
                )));
            }
        }
        states.push(h.clone());
    }
    Ok((
        y,
        ScanCache {
            u: u.clone(),
            cond: cond.clone(),
            delta_pre,
            delta,
            b_in,
            c_out,
            states,
        },
    ))
}

/// Backward through [`selective_scan`]. Accumulates parameter grads and
/// returns (du, dcond).
pub fn selective_scan_backward(
    params: &mut ModelParams,
    prefix: &str,
    cache: &ScanCache,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (l_len, d) = (cache.u.rows(), cache.u.cols());
    let a_log = params.get(&format!("{prefix}.a_log")).clone();
    let d_skip = params.get(&format!("{prefix}.d_skip")).clone();
    let n = cache.b_in.cols();

    let mut du = Tensor::zeros(&[l_len, d]);
    let mut ddelta = Tensor::zeros(&[l_len, d]);
    let mut db_in = Tensor::zeros(&[l_len, n]);
    let mut dc_out = Tensor::zeros(&[l_len, n]);
    let mut da_log = Tensor::zeros(&[d, n]);
    let mut dd_skip = Tensor::zeros(&[d]);
    let mut dh = Tensor::zeros(&[d, n]);

    let zero = Tensor::zeros(&[d, n]);
    for l in (0..l_len).rev() {
        let h_l = &cache.states[l];
        let h_prev = if l == 0 { &zero } else { &cache.states[l - 1] };
        for c in 0..d {
            let g = dy.at2(l, c);
            let uv = cache.u.at2(l, c);
            let dt = cache.delta.at2(l, c);
            dd_skip.data_mut()[c] += g * uv;
            du.data_mut()[l * d + c] += g * d_skip.data()[c];
            for s in 0..n {
                // y contribution
                let mut dhv = dh.at2(c, s) + g * cache.c_out.at2(l, s);
                dc_out.data_mut()[l * n + s] += g * h_l.at2(c, s);
                // recurrence h_l = decay h_{l-1} + dt B u
                let a = -a_log.at2(c, s).exp();
                let decay = (dt * a).exp();
                let hp = h_prev.at2(c, s);
                ddelta.data_mut()[l * d + c] +=
                    dhv * (hp * decay * a + cache.b_in.at2(l, s) * uv);
                // dA enters via decay = exp(dt*A); A = -exp(a_log)
                da_log.data_mut()[c * n + s] += dhv * hp * decay * dt * a;
                db_in.data_mut()[l * n + s] += dhv * dt * uv;
                du.data_mut()[l * d + c] += dhv * dt * cache.b_in.at2(l, s);
                dhv *= decay;
                *dh.at2_mut(c, s) = dhv;
            }
        }
    }

    // project back through delta = softplus(cond W_delta + b_delta)
    let mut dpre = ddelta;
    for (v, p) in dpre.data_mut().iter_mut().zip(cache.delta_pre.data()) {
        *v *= sigmoid(*p);
    }
    let w_delta = params.get(&format!("{prefix}.w_delta")).clone();
    let (mut dcond, dw_delta, db_delta) = linear_backward(&cache.cond, &w_delta, &dpre);
    let w_b = params.get(&format!("{prefix}.w_b")).clone();
    let (dcond_b, dw_b, _) = linear_backward(&cache.cond, &w_b, &db_in);
    let w_c = params.get(&format!("{prefix}.w_c")).clone();
    let (dcond_c, dw_c, _) = linear_backward(&cache.cond, &w_c, &dc_out);
    dcond.add_assign(&dcond_b);
    dcond.add_assign(&dcond_c);

    params.accumulate(&format!("{prefix}.w_delta"), &dw_delta);
    params.accumulate(&format!("{prefix}.b_delta"), &db_delta);
    params.accumulate(&format!("{prefix}.w_b"), &dw_b);
    params.accumulate(&format!("{prefix}.w_c"), &dw_c);
    params.accumulate(&format!("{prefix}.a_log"), &da_log);
    params.accumulate(&format!("{prefix}.d_skip"), &dd_skip);
    (du, dcond)
}

pub struct MambaCrossCache {
    pub scan: ScanCache,
    pub scan_out: Tensor,
    pub gate_pre: Tensor,
    pub gate: Tensor,
}

/// Gated cross-conditioned scan: y = sigmoid(cond W_g + b_g) * scan(x, cond).
pub fn mamba_cross(
    params: &ModelParams,
    prefix: &str,
    x: &Tensor,
    cond: &Tensor,
) -> Result<(Tensor, MambaCrossCache)> {
    let (scan_out, scan) = selective_scan(params, prefix, x, cond)?;
    let w_gate = params.get(&format!("{prefix}.w_gate"));
    let b_gate = params.get(&format!("{prefix}.b_gate"));
    let d = x.cols();
    let mut gate_pre = cond.matmul(w_gate)?;
    for row in gate_pre.data_mut().chunks_mut(d) {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b_gate.data()[j];
        }
    }
    let mut gate = gate_pre.clone();
    for v in gate.data_mut() {
        *v = sigmoid(*v);
    }
    let y = gate.hadamard(&scan_out)?;
    Ok((y, MambaCrossCache { scan, scan_out, gate_pre, gate }))
}

/// Backward through [`mamba_cross`]; returns (dx, dcond).
pub fn mamba_cross_backward(
    params: &mut ModelParams,
    prefix: &str,
    cache: &MambaCrossCache,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let dscan = dy.hadamard(&cache.gate).unwrap();
    let mut dgate_pre = dy.hadamard(&cache.scan_out).unwrap();
    for (v, g) in dgate_pre.data_mut().iter_mut().zip(cache.gate.data()) {
        *v *= g * (1.0 - g);
    }
    let w_gate = params.get(&format!("{prefix}.w_gate")).clone();
    let (dcond_gate, dw_gate, db_gate) = linear_backward(&cache.scan.cond, &w_gate, &dgate_pre);
    params.accumulate(&format!("{prefix}.w_gate"), &dw_gate);
    params.accumulate(&format!("{prefix}.b_gate"), &db_gate);
    let (dx, mut dcond) = selective_scan_backward(params, prefix, &cache.scan, &dscan);
    dcond.add_assign(&dcond_gate);
    (dx, dcond)
}

/// Elementwise product of `x` with the other modality mean-pooled over its
/// sequence axis and broadcast, keeping the product well-typed for any
/// length pair.
pub fn cross_condition(x: &Tensor, other: &Tensor) -> Tensor {
    let pooled = other.mean_rows();
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] *= pooled.data()[j];
        }
    }
    out
}

/// Backward of [`cross_condition`]; returns (dx, dother).
pub fn cross_condition_backward(x: &Tensor, other: &Tensor, dcond: &Tensor) -> (Tensor, Tensor) {
    let pooled = other.mean_rows();
    let d = x.cols();
    let mut dx = dcond.clone();
    let mut dpool = vec![0.0; d];
    for (row_dc, row_x) in dcond.data().chunks(d).zip(x.data().chunks(d)) {
        for j in 0..d {
            dpool[j] += row_dc[j] * row_x[j];
        }
    }
    for row in dx.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] *= pooled.data()[j];
        }
    }
    let l_other = other.rows() as f64;
    let mut dother = Tensor::zeros(other.shape());
    for row in dother.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = dpool[j] / l_other;
        }
    }
    (dx, dother)
}

pub struct UnitCache {
    pub mc: MambaCrossCache,
    pub mc_out: Tensor,
    pub x: Tensor,
    pub other: Tensor,
}

/// One stream of a cross-modal block: Fus(mamba_cross(x, x*pool(other))) + x.
pub fn cmm_unit(
    params: &ModelParams,
    prefix: &str,
    x: &Tensor,
    other: &Tensor,
) -> Result<(Tensor, UnitCache)> {
    let cond = cross_condition(x, other);
    let (mc_out, mc) = mamba_cross(params, prefix, x, &cond)?;
    let fus_w = params.get(&format!("{prefix}.fus_w"));
    let fus_b = params.get(&format!("{prefix}.fus_b"));
    let mut fused = mc_out.matmul(fus_w)?;
    let d = x.cols();
    for row in fused.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] += fus_b.data()[j];
        }
    }
    let out = fused.add(x)?;
    Ok((out, UnitCache { mc, mc_out, x: x.clone(), other: other.clone() }))
}

/// Backward of [`cmm_unit`]; returns (dx, dother).
pub fn cmm_unit_backward(
    params: &mut ModelParams,
    prefix: &str,
    cache: &UnitCache,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let fus_w = params.get(&format!("{prefix}.fus_w")).clone();
    let (dmc_out, dfus_w, dfus_b) = linear_backward(&cache.mc_out, &fus_w, dy);
    params.accumulate(&format!("{prefix}.fus_w"), &dfus_w);
    params.accumulate(&format!("{prefix}.fus_b"), &dfus_b);
    let (dx_scan, dcond) = mamba_cross_backward(params, prefix, &cache.mc, &dmc_out);
    let (dx_cond, dother) = cross_condition_backward(&cache.x, &cache.other, &dcond);
    let mut dx = dy.clone(); // residual
    dx.add_assign(&dx_scan);
    dx.add_assign(&dx_cond);
    (dx, dother)
}

/// The four streams flowing through the block stack.
#[derive(Debug, Clone)]
pub struct CmmStreams {
    /// queries fused with text (length L_q)
    pub z: Tensor,
    /// text fused with the query stream (length L_t)
    pub t_v: Tensor,
    /// knowledge fused with text (length N_v)
    pub k: Tensor,
    /// text fused with knowledge (length L_t)
    pub t_k: Tensor,
}

pub struct BlockCache {
    pub z: UnitCache,
    pub t_v: UnitCache,
    pub k: UnitCache,
    pub t_k: UnitCache,
}

/// One cross-modal block: the two stream pairs of the interaction module.
/// Unit parameter prefixes live under `cmir.b{index}.{stream}`.
pub fn cmm_block(
    params: &ModelParams,
    index: usize,
    streams: &CmmStreams,
) -> Result<(CmmStreams, BlockCache)> {
    let p = |s: &str| format!("cmir.b{index}.{s}");
    let (z, cz) = cmm_unit(params, &p("z"), &streams.z, &streams.t_v)?;
    let (t_v, ctv) = cmm_unit(params, &p("t_v"), &streams.t_v, &streams.z)?;
    let (k, ck) = cmm_unit(params, &p("k"), &streams.k, &streams.t_k)?;
    let (t_k, ctk) = cmm_unit(params, &p("t_k"), &streams.t_k, &streams.k)?;
    Ok((
        CmmStreams { z, t_v, k, t_k },
        BlockCache { z: cz, t_v: ctv, k: ck, t_k: ctk },
    ))
}

/// Backward of [`cmm_block`]; gradients for the four output streams in,
/// gradients for the four input streams out.
pub fn cmm_block_backward(
    params: &mut ModelParams,
    index: usize,
    cache: &BlockCache,
    d_out: &CmmStreams,
) -> CmmStreams {
    let p = |s: &str| format!("cmir.b{index}.{s}");
    let (dz_a, dtv_a) = cmm_unit_backward(params, &p("z"), &cache.z, &d_out.z);
    let (dtv_b, dz_b) = cmm_unit_backward(params, &p("t_v"), &cache.t_v, &d_out.t_v);
    let (dk_a, dtk_a) = cmm_unit_backward(params, &p("k"), &cache.k, &d_out.k);
    let (dtk_b, dk_b) = cmm_unit_backward(params, &p("t_k"), &cache.t_k, &d_out.t_k);
    let mut z = dz_a;
    z.add_assign(&dz_b);
    let mut t_v = dtv_a;
    t_v.add_assign(&dtv_b);
    let mut k = dk_a;
    k.add_assign(&dk_b);
    let mut t_k = dtk_a;
    t_k.add_assign(&dtk_b);
    CmmStreams { z, t_v, k, t_k }
}

pub fn init_block_params<R: rand::Rng>(
    params: &mut ModelParams,
    num_blocks: usize,
    d: usize,
    n: usize,
    rng: &mut R,
) {
    for b in 0..num_blocks {
        for s in ["z", "t_v", "k", "t_k"] {
            init_unit_params(params, &format!("cmir.b{b}.{s}"), d, n, rng);
        }
    }
}

/// Run the configured number of blocks, threading the four streams.
pub fn cmm_stack(
    params: &ModelParams,
    num_blocks: usize,
    input: &CmmStreams,
) -> Result<(CmmStreams, Vec<BlockCache>)> {
    let mut streams = input.clone();
    let mut caches = Vec::with_capacity(num_blocks);
    for b in 0..num_blocks {
        let (next, cache) = cmm_block(params, b, &streams)?;
        streams = next;
        caches.push(cache);
    }
    Ok((streams, caches))
}

pub fn cmm_stack_backward(
    params: &mut ModelParams,
    num_blocks: usize,
    caches: &[BlockCache],
    d_out: &CmmStreams,
) -> CmmStreams {
    let mut grad = d_out.clone();
    for b in (0..num_blocks).rev() {
        grad = cmm_block_backward(params, b, &caches[b], &grad);
    }
    grad
}

/// Tripartite fusion: x_text = t_v + eta t_k + theta align(k), then the
/// query stream is concatenated in front along the sequence axis. The
/// knowledge stream (length N_v) is aligned to the text length by
/// mean-pool-and-broadcast.
pub fn fuse_tripartite(streams: &CmmStreams, w: &FusionWeights) -> Result<Tensor> {
    if streams.t_v.shape() != streams.t_k.shape() {
        return Err(Error::Shape(format!(
            "text streams disagree: {:?} vs {:?}",
            streams.t_v.shape(),
            streams.t_k.shape()
        )));
    }
    let d = streams.t_v.cols();
    if streams.k.cols() != d || streams.z.cols() != d {
        return Err(Error::Shape("stream dims disagree".into()));
    }
    let k_pooled = streams.k.mean_rows();
    let mut x_text = streams.t_v.clone();
    x_text.add_assign_scaled(&streams.t_k, w.eta);
    for row in x_text.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] += w.theta * k_pooled.data()[j];
        }
    }
    let mut data = streams.z.data().to_vec();
    data.extend_from_slice(x_text.data());
    Tensor::new(&[streams.z.rows() + x_text.rows(), d], data)
}

/// Backward of [`fuse_tripartite`]; splits the fused gradient back into
/// the four streams.
pub fn fuse_tripartite_backward(
    streams: &CmmStreams,
    w: &FusionWeights,
    d_xf: &Tensor,
) -> CmmStreams {
    let d = streams.t_v.cols();
    let l_z = streams.z.rows();
    let l_t = streams.t_v.rows();
    let mut dz = Tensor::zeros(streams.z.shape());
    dz.data_mut()
        .copy_from_slice(&d_xf.data()[..l_z * d]);
    let d_text = Tensor::new(&[l_t, d], d_xf.data()[l_z * d..].to_vec()).unwrap();
    let dt_v = d_text.clone();
    let dt_k = d_text.scale(w.eta);
    let mut pooled_grad = vec![0.0; d];
    for row in d_text.data().chunks(d) {
        for j in 0..d {
            pooled_grad[j] += w.theta * row[j];
        }
    }
    let n_k = streams.k.rows() as f64;
    let mut dk = Tensor::zeros(streams.k.shape());
    for row in dk.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = pooled_grad[j] / n_k;
        }
    }
    CmmStreams { z: dz, t_v: dt_v, k: dk, t_k: dt_k }
}

// --- analytic complexity model ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionArch {
    /// Cross-modal selective-scan unit.
    Cmm,
    /// Single-head cross-attention baseline.
    CrossAttention,
}

/// Reference full-scale measurements for the two fusion paths, in GFLOPs.
/// Recorded for context only; desk-scale counts are checked through the
/// scaling law, not absolute numbers.
pub const FULL_SCALE_CMM_GFLOPS: f64 = 13.8;
pub const FULL_SCALE_CA_GFLOPS: f64 = 18.2;

/// Analytic multiply-accumulate count of one fusion unit at sequence
/// length `l`, model dim `d`, state size `n`.
///
/// The scan path is Theta(L d n + L d^2); the attention baseline is
/// Theta(L^2 d + L d^2).
pub fn flop_count(arch: FusionArch, l: u64, d: u64, n: u64) -> u64 {
    match arch {
        FusionArch::Cmm => {
            let delta_proj = l * d * d;
            let bc_proj = 2 * l * d * n;
            let gate_proj = l * d * d;
            // per step, channel, state: decay*h, dt*B*u (2), C*h
            let scan = 4 * l * d * n;
            let skip = l * d;
            let gate_mul = l * d;
            let fus = l * d * d;
            delta_proj + bc_proj + gate_proj + scan + skip + gate_mul + fus
        }
        FusionArch::CrossAttention => {
            let proj = 4 * l * d * d;
            let scores = l * l * d;
            let weighted = l * l * d;
            proj + scores + weighted
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_params(d: usize, n: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        init_unit_params(&mut p, "u", d, n, &mut rng);
        // randomize the parts initialized to constants so gradients are generic
        let mut jitter = |name: &str, std: f64| {
            let shape = p.get(name).shape().to_vec();
            let noise = Tensor::randn(&shape, std, &mut rng);
            p.get_mut(name).add_assign(&noise);
        };
        jitter("u.b_delta", 0.3);
        jitter("u.d_skip", 0.3);
        jitter("u.b_gate", 0.3);
        jitter("u.fus_w", 0.3);
        jitter("u.fus_b", 0.3);
        p
    }

    #[test]
    fn scan_zero_output_projection_leaves_skip_path() {
        let d = 3;
        let mut p = unit_params(d, 2, 1);
        *p.get_mut("u.w_c") = Tensor::zeros(&[d, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::randn(&[4, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[4, d], 1.0, &mut rng);
        let (y, _) = selective_scan(&p, "u", &u, &cond).unwrap();
        let d_skip = p.get("u.d_skip");
        for l in 0..4 {
            for c in 0..d {
                assert!((y.at2(l, c) - d_skip.data()[c] * u.at2(l, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scan_single_step_has_no_recurrence() {
        let d = 2;
        let n = 3;
        let p = unit_params(d, n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::randn(&[1, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[1, d], 1.0, &mut rng);
        let (y, cache) = selective_scan(&p, "u", &u, &cond).unwrap();
        for c in 0..d {
            let dt = cache.delta.at2(0, c);
            let mut want = p.get("u.d_skip").data()[c] * u.at2(0, c);
            for s in 0..n {
                want += cache.c_out.at2(0, s) * dt * cache.b_in.at2(0, s) * u.at2(0, c);
            }
            assert!((y.at2(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_matches_explicit_recurrence_oracle() {
        let (d, n, l_len) = (2, 3, 5);
        let p = unit_params(d, n, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let (y, _) = selective_scan(&p, "u", &u, &cond).unwrap();
        // independent step-by-step evaluation from the raw parameters
        let w_delta = p.get("u.w_delta");
        let b_delta = p.get("u.b_delta");
        let w_b = p.get("u.w_b");
        let w_c = p.get("u.w_c");
        let a_log = p.get("u.a_log");
        let d_skip = p.get("u.d_skip");
        let mut h = vec![vec![0.0; n]; d];
        for l in 0..l_len {
            let mut dts = vec![0.0; d];
            for c in 0..d {
                let mut pre = b_delta.data()[c];
                for j in 0..d {
                    pre += cond.at2(l, j) * w_delta.at2(j, c);
                }
                dts[c] = pre.exp().ln_1p();
            }
            let mut bs = vec![0.0; n];
            let mut cs = vec![0.0; n];
            for s in 0..n {
                for j in 0..d {
                    bs[s] += cond.at2(l, j) * w_b.at2(j, s);
                    cs[s] += cond.at2(l, j) * w_c.at2(j, s);
                }
            }
            for c in 0..d {
                let mut out = d_skip.data()[c] * u.at2(l, c);
                for s in 0..n {
                    let a = -a_log.at2(c, s).exp();
                    h[c][s] = (dts[c] * a).exp() * h[c][s] + dts[c] * bs[s] * u.at2(l, c);
                    out += cs[s] * h[c][s];
                }
                assert!((y.at2(l, c) - out).abs() < 1e-12, "step {l} channel {c}");
            }
        }
    }

    #[test]
    fn scan_is_causal() {
        let (d, n, l_len) = (3, 2, 6);
        let p = unit_params(d, n, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let (y, _) = selective_scan(&p, "u", &u, &cond).unwrap();
        // perturb u and cond at position 3: outputs before 3 must be
        // bit-identical
        let mut u2 = u.clone();
        let mut cond2 = cond.clone();
        for c in 0..d {
            *u2.at2_mut(3, c) += 1.5;
            *cond2.at2_mut(3, c) -= 0.7;
        }
        let (y2, _) = selective_scan(&p, "u", &u2, &cond2).unwrap();
        for l in 0..3 {
            for c in 0..d {
                assert_eq!(y.at2(l, c), y2.at2(l, c));
            }
        }
        assert!((0..d).any(|c| y.at2(3, c) != y2.at2(3, c)));
    }

    #[test]
    fn scan_is_stable_over_long_sequences() {
        let (d, n) = (2, 4);
        let p = unit_params(d, n, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let l_len = 10_000;
        let u = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let (y, _) = selective_scan(&p, "u", &u, &cond).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let (d, n, l_len) = (2, 3, 5);
        let mut p = unit_params(d, n, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        p.insert("in.u", Tensor::randn(&[l_len, d], 1.0, &mut rng));
        p.insert("in.cond", Tensor::randn(&[l_len, d], 1.0, &mut rng));
        let wsum = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let loss = |p: &ModelParams| {
            let (y, _) = selective_scan(p, "u", p.get("in.u"), p.get("in.cond")).unwrap();
            y.dot(&wsum)
        };
        let fd = finite_diff_gradient(loss, &mut p, 1e-5).unwrap();
        p.zero_grads();
        let (_, cache) = selective_scan(&p, "u", p.get("in.u"), p.get("in.cond")).unwrap();
        let (du, dcond) = selective_scan_backward(&mut p, "u", &cache, &wsum);
        p.accumulate("in.u", &du);
        p.accumulate("in.cond", &dcond);
        for name in fd.keys() {
            if name.starts_with("u.w_gate") || name.starts_with("u.b_gate")
                || name.starts_with("u.fus") {
                continue; // not part of the bare scan
            }
            for (a, b) in p.grad(name).data().iter().zip(fd[name].data()) {
                assert!(rel_err(*a, *b) < 1e-4, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gate_saturation_closes_the_output() {
        let d = 3;
        let mut p = unit_params(d, 2, 13);
        *p.get_mut("u.b_gate") = Tensor::full(&[d], -60.0);
        *p.get_mut("u.w_gate") = Tensor::zeros(&[d, d]);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[4, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[4, d], 1.0, &mut rng);
        let (y, _) = mamba_cross(&p, "u", &x, &cond).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn self_conditioning_is_plain_gated_scan() {
        let d = 3;
        let p = unit_params(d, 2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Tensor::randn(&[4, d], 1.0, &mut rng);
        let (y, _) = mamba_cross(&p, "u", &x, &x).unwrap();
        // compose the two halves independently
        let (scan_out, _) = selective_scan(&p, "u", &x, &x).unwrap();
        let mut gate = x.matmul(p.get("u.w_gate")).unwrap();
        for row in gate.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = sigmoid(row[j] + p.get("u.b_gate").data()[j]);
            }
        }
        let want = gate.hadamard(&scan_out).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mamba_cross_gradients_match_finite_differences() {
        let (d, n, l_len) = (2, 2, 4);
        let mut p = unit_params(d, n, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        p.insert("in.x", Tensor::randn(&[l_len, d], 1.0, &mut rng));
        p.insert("in.cond", Tensor::randn(&[l_len, d], 1.0, &mut rng));
        let wsum = Tensor::randn(&[l_len, d], 1.0, &mut rng);
        let loss = |p: &ModelParams| {
            let (y, _) = mamba_cross(p, "u", p.get("in.x"), p.get("in.cond")).unwrap();
            y.dot(&wsum)
        };
        let fd = finite_diff_gradient(loss, &mut p, 1e-5).unwrap();
        p.zero_grads();
        let (_, cache) = mamba_cross(&p, "u", p.get("in.x"), p.get("in.cond")).unwrap();
        let (dx, dcond) = mamba_cross_backward(&mut p, "u", &cache, &wsum);
        p.accumulate("in.x", &dx);
        p.accumulate("in.cond", &dcond);
        for name in fd.keys() {
            if name.starts_with("u.fus") {
                continue;
            }
            for (a, b) in p.grad(name).data().iter().zip(fd[name].data()) {
                assert!(rel_err(*a, *b) < 1e-4, "{name}: {a} vs {b}");
            }
        }
    }

    fn streams(seed: u64, d: usize) -> CmmStreams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CmmStreams {
            z: Tensor::randn(&[2, d], 1.0, &mut rng),
            t_v: Tensor::randn(&[3, d], 1.0, &mut rng),
            k: Tensor::randn(&[2, d], 1.0, &mut rng),
            t_k: Tensor::randn(&[3, d], 1.0, &mut rng),
        }
    }

    #[test]
    fn zero_fusion_map_gives_pure_residual() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut p = ModelParams::new();
        init_block_params(&mut p, 1, d, 2, &mut rng);
        for s in ["z", "t_v", "k", "t_k"] {
            *p.get_mut(&format!("cmir.b0.{s}.fus_w")) = Tensor::zeros(&[d, d]);
            *p.get_mut(&format!("cmir.b0.{s}.fus_b")) = Tensor::zeros(&[d]);
        }
        let input = streams(20, d);
        let (out, _) = cmm_block(&p, 0, &input).unwrap();
        assert_eq!(out.z, input.z);
        assert_eq!(out.t_v, input.t_v);
        assert_eq!(out.k, input.k);
        assert_eq!(out.t_k, input.t_k);
    }

    #[test]
    fn block_stack_preserves_shapes_at_every_depth() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for depth in 1..=4 {
            let mut p = ModelParams::new();
            init_block_params(&mut p, depth, d, 2, &mut rng);
            let input = streams(22, d);
            let (out, _) = cmm_stack(&p, depth, &input).unwrap();
            assert_eq!(out.z.shape(), input.z.shape());
            assert_eq!(out.t_v.shape(), input.t_v.shape());
            assert_eq!(out.k.shape(), input.k.shape());
            assert_eq!(out.t_k.shape(), input.t_k.shape());
        }
    }

    #[test]
    fn block_matches_straight_line_composition() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = ModelParams::new();
        init_block_params(&mut p, 1, d, 3, &mut rng);
        let input = streams(24, d);
        let (out, _) = cmm_block(&p, 0, &input).unwrap();
        // re-derive the z stream through the composed oracles
        let cond = cross_condition(&input.z, &input.t_v);
        let (mc, _) = mamba_cross(&p, "cmir.b0.z", &input.z, &cond).unwrap();
        let mut want = mc.matmul(p.get("cmir.b0.z.fus_w")).unwrap();
        for row in want.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] += p.get("cmir.b0.z.fus_b").data()[j];
            }
        }
        let want = want.add(&input.z).unwrap();
        for (a, b) in out.z.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_with_zero_weights_is_the_primary_text_stream() {
        let s = streams(25, 4);
        let xf = fuse_tripartite(&s, &FusionWeights::new(0.0, 0.0).unwrap()).unwrap();
        // trailing rows equal t_v exactly
        let d = 4;
        let l_z = s.z.rows();
        for r in 0..s.t_v.rows() {
            for c in 0..d {
                assert_eq!(xf.at2(l_z + r, c), s.t_v.at2(r, c));
            }
        }
        assert_eq!(xf.rows(), s.z.rows() + s.t_v.rows());
    }

    #[test]
    fn fuse_default_weights_on_unit_tensors() {
        // eta = theta = 0.1 on all-ones streams: x_text = 1.2 * ones
        let d = 3;
        let s = CmmStreams {
            z: Tensor::full(&[2, d], 1.0),
            t_v: Tensor::full(&[2, d], 1.0),
            k: Tensor::full(&[4, d], 1.0),
            t_k: Tensor::full(&[2, d], 1.0),
        };
        let xf = fuse_tripartite(&s, &FusionWeights::new(0.1, 0.1).unwrap()).unwrap();
        for r in 2..4 {
            for c in 0..d {
                assert!((xf.at2(r, c) - 1.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_fusion_weights_are_config_errors() {
        assert!(FusionWeights::new(-0.1, 0.0).is_err());
        assert!(FusionWeights::new(0.0, -0.1).is_err());
    }

    #[test]
    fn full_stack_gradient_matches_finite_differences() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut p = ModelParams::new();
        init_block_params(&mut p, 2, d, 2, &mut rng);
        // jitter constant inits for generic gradients
        let names: Vec<String> = p.keys().cloned().collect();
        for name in &names {
            let shape = p.get(name).shape().to_vec();
            let noise = Tensor::randn(&shape, 0.1, &mut rng);
            p.get_mut(name).add_assign(&noise);
        }
        p.insert("in.z", Tensor::randn(&[2, d], 0.8, &mut rng));
        p.insert("in.t", Tensor::randn(&[3, d], 0.8, &mut rng));
        p.insert("in.k", Tensor::randn(&[2, d], 0.8, &mut rng));
        let w = FusionWeights::new(0.1, 0.1).unwrap();
        let wsum = Tensor::randn(&[5, d], 1.0, &mut rng);
        let loss = |p: &ModelParams| {
            let input = CmmStreams {
                z: p.get("in.z").clone(),
                t_v: p.get("in.t").clone(),
                k: p.get("in.k").clone(),
                t_k: p.get("in.t").clone(),
            };
            let (out, _) = cmm_stack(p, 2, &input).unwrap();
            fuse_tripartite(&out, &w).unwrap().dot(&wsum)
        };
        let fd = finite_diff_gradient(loss, &mut p, 1e-5).unwrap();
        p.zero_grads();
        let input = CmmStreams {
            z: p.get("in.z").clone(),
            t_v: p.get("in.t").clone(),
            k: p.get("in.k").clone(),
            t_k: p.get("in.t").clone(),
        };
        let (out, caches) = cmm_stack(&p, 2, &input).unwrap();
        let d_streams = fuse_tripartite_backward(&out, &w, &wsum);
        let d_in = cmm_stack_backward(&mut p, 2, &caches, &d_streams);
        p.accumulate("in.z", &d_in.z);
        let mut dt = d_in.t_v.clone();
        dt.add_assign(&d_in.t_k);
        p.accumulate("in.t", &dt);
        p.accumulate("in.k", &d_in.k);
        for name in fd.keys() {
            for (a, b) in p.grad(name).data().iter().zip(fd[name].data()) {
                // absolute floor: central differences bottom out near 1e-10
                // on gradients this small
                assert!(
                    rel_err(*a, *b) < 1e-4 || (a - b).abs() < 1e-9,
                    "{name}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn flop_model_term_structure() {
        let (d, n) = (16u64, 4u64);
        for l in [8u64, 64, 256] {
            // scan path is exactly linear in L
            assert_eq!(flop_count(FusionArch::Cmm, 2 * l, d, n), 2 * flop_count(FusionArch::Cmm, l, d, n));
            // attention quadratic term quadruples when L doubles
            let quad = |l: u64| flop_count(FusionArch::CrossAttention, l, d, n) - 4 * l * d * d;
            assert_eq!(quad(2 * l), 4 * quad(l));
        }
    }

    #[test]
    fn flop_model_hand_tally() {
        // L=8, d=4, N=2, term by term:
        // cmm: delta 8*16=128, B/C 2*8*8=128, gate 128, scan 4*8*8=256,
        //      skip 32, gate mul 32, fus 128 -> 832
        assert_eq!(flop_count(FusionArch::Cmm, 8, 4, 2), 832);
        // ca: proj 4*8*16=512, scores 8*8*4=256, weighted 256 -> 1024
        assert_eq!(flop_count(FusionArch::CrossAttention, 8, 4, 2), 1024);
    }
}
