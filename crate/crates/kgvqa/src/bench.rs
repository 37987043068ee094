//! Complexity benchmark: times the cross-modal scan unit against a
//! single-head cross-attention baseline over growing sequence lengths and
//! fits log-log slopes.
//!
//! The scan path should scale close to linearly in L and the attention
//! path close to quadratically once the quadratic term dominates. FLOP
//! columns come from the same analytic model the unit tests check, so
//! they are exactly reproducible; wall times are medians over repeated
//! runs with automatic repetition widening when a measurement would fall
//! under the timer floor.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{flop_count, init_unit_params, mamba_cross, FusionArch};
use crate::numerics::attend;
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub arch: FusionArch,
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub flops: u64,
    pub wall_ns_median: u128,
    pub wall_ns_p10: u128,
    pub wall_ns_p90: u128,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub cmm_slope: f64,
    pub ca_slope: f64,
    /// Lengths whose repetitions were widened to clear the timer floor.
    pub widened: Vec<(FusionArch, usize)>,
}

pub const BENCH_HEADER: &str = "arch,L,d,N,flops,wall_ns_median,wall_ns_p10,wall_ns_p90";

fn arch_name(a: FusionArch) -> &'static str {
    match a {
        FusionArch::Cmm => "cmm",
        FusionArch::CrossAttention => "cross_attention",
    }
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            arch_name(self.arch),
            self.l,
            self.d,
            self.n,
            self.flops,
            self.wall_ns_median,
            self.wall_ns_p10,
            self.wall_ns_p90
        )
    }
}

struct CaParams {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

fn run_cmm(params: &ModelParams, x: &Tensor, cond: &Tensor) -> f64 {
    let (y, _) = mamba_cross(params, "bench", x, cond).unwrap();
    y.data()[0]
}

fn run_ca(p: &CaParams, x: &Tensor, other: &Tensor) -> f64 {
    let q = x.matmul(&p.wq).unwrap();
    let k = other.matmul(&p.wk).unwrap();
    let v = other.matmul(&p.wv).unwrap();
    let (o, _) = attend(&q, &k, &v, false);
    let y = o.matmul(&p.wo).unwrap();
    y.data()[0]
}

/// Minimum inner duration per timed sample; below this the repetition
/// count is doubled so timer granularity cannot dominate.
const MIN_SAMPLE_NS: u128 = 1_000_000;

fn time_closure<F: FnMut() -> f64>(mut f: F, repeats: usize) -> (Vec<u128>, bool) {
    let mut iters = 1u32;
    let mut widened = false;
    // warmup and calibration
    loop {
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..iters {
            sink += f();
        }
        let elapsed = t0.elapsed().as_nanos();
        std::hint::black_box(sink);
        if elapsed >= MIN_SAMPLE_NS || iters >= 1 << 20 {
            break;
        }
        iters *= 2;
        widened = true;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..iters {
            sink += f();
        }
        let elapsed = t0.elapsed().as_nanos();
        std::hint::black_box(sink);
        samples.push(elapsed / iters as u128);
    }
    samples.sort_unstable();
    (samples, widened)
}

fn percentile(sorted: &[u128], q: f64) -> u128 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Least-squares slope of ln(wall) against ln(L).
pub fn log_log_slope(points: &[(usize, u128)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(l, _)| (*l as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, w)| (*w as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Time both fusion paths at each length and fit per-arch scaling slopes.
pub fn run_benchmark(lengths: &[usize], d: usize, n: usize, repeats: usize) -> Result<BenchReport> {
    if lengths.len() < 3 {
        return Err(Error::Config("benchmark needs at least 3 lengths".into()));
    }
    if !lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("benchmark lengths must be ascending".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut params = ModelParams::new();
    init_unit_params(&mut params, "bench", d, n, &mut rng);
    let std = 1.0 / (d as f64).sqrt();
    let ca = CaParams {
        wq: Tensor::randn(&[d, d], std, &mut rng),
        wk: Tensor::randn(&[d, d], std, &mut rng),
        wv: Tensor::randn(&[d, d], std, &mut rng),
        wo: Tensor::randn(&[d, d], std, &mut rng),
    };
    let mut rows = Vec::new();
    let mut widened = Vec::new();
    for &l in lengths {
        let x = Tensor::randn(&[l, d], 1.0, &mut rng);
        let cond = Tensor::randn(&[l, d], 1.0, &mut rng);
        for arch in [FusionArch::Cmm, FusionArch::CrossAttention] {
            let (samples, was_widened) = match arch {
                FusionArch::Cmm => time_closure(|| run_cmm(&params, &x, &cond), repeats),
                FusionArch::CrossAttention => time_closure(|| run_ca(&ca, &x, &cond), repeats),
            };
            if was_widened {
                widened.push((arch, l));
            }
            rows.push(BenchRow {
                arch,
                l,
                d,
                n,
                flops: flop_count(arch, l as u64, d as u64, n as u64),
                wall_ns_median: percentile(&samples, 0.5),
                wall_ns_p10: percentile(&samples, 0.1),
                wall_ns_p90: percentile(&samples, 0.9),
            });
        }
    }
    let pick = |arch: FusionArch| -> Vec<(usize, u128)> {
        rows.iter()
            .filter(|r| r.arch == arch)
            .map(|r| (r.l, r.wall_ns_median))
            .collect()
    };
    let cmm_slope = log_log_slope(&pick(FusionArch::Cmm));
    let ca_slope = log_log_slope(&pick(FusionArch::CrossAttention));
    Ok(BenchReport { rows, cmm_slope, ca_slope, widened })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_HEADER);
        for r in &self.rows {
            out.push('\n');
            out.push_str(&r.to_csv());
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let lin: Vec<(usize, u128)> = [256usize, 512, 1024]
            .iter()
            .map(|&l| (l, 10 * l as u128))
            .collect();
        assert!((log_log_slope(&lin) - 1.0).abs() < 1e-9);
        let quad: Vec<(usize, u128)> = [256usize, 512, 1024]
            .iter()
            .map(|&l| (l, (l as u128) * (l as u128)))
            .collect();
        assert!((log_log_slope(&quad) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn flop_column_matches_the_analytic_model() {
        let report = run_benchmark(&[8, 16, 32], 8, 4, 2).unwrap();
        for r in &report.rows {
            assert_eq!(r.flops, flop_count(r.arch, r.l as u64, r.d as u64, r.n as u64));
        }
    }

    #[test]
    fn flop_columns_are_identical_across_runs() {
        let a = run_benchmark(&[8, 16, 32], 8, 4, 2).unwrap();
        let b = run_benchmark(&[8, 16, 32], 8, 4, 2).unwrap();
        let fl = |r: &BenchReport| r.rows.iter().map(|x| x.flops).collect::<Vec<_>>();
        assert_eq!(fl(&a), fl(&b));
    }

    #[test]
    fn bad_length_lists_are_config_errors() {
        assert!(run_benchmark(&[8, 16], 8, 4, 2).is_err());
        assert!(run_benchmark(&[16, 8, 32], 8, 4, 2).is_err());
    }
}
