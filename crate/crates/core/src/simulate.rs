//! Deterministic counter-stream simulator and the clock-sampling error study.
//!
//! Tensor activity is emitted as the exact average of a piecewise-constant
//! phase schedule over each sampling interval, the way the hardware counter
//! accumulates it. The SM clock is an instantaneous reading of a noisy
//! process that redraws `update_hz` times per second. Averaging the former
//! and point-sampling the latter is what makes coarse scrape intervals noisy.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::metric::{ofu_point, CounterSample, MeanAccumulator};

/// Seed used when the caller does not pick one.
pub const DEFAULT_SEED: u64 = 0x5EED_0F0F;

/// z-score for a two-sided 95% normal interval.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("interval {interval_s} s is not a positive integer multiple of the base interval {base_s} s")]
    NonMultipleInterval { interval_s: f64, base_s: f64 },
}

/// Independent truncated-normal clock draws, one per update tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClockModel {
    pub mean_mhz: f64,
    pub std_mhz: f64,
    pub min_mhz: f64,
    pub max_mhz: f64,
    pub update_hz: f64,
}

impl ClockModel {
    /// Sustained large BF16 GEMM on H100 sampled at 1 kHz.
    pub const H100_GEMM: ClockModel = ClockModel {
        mean_mhz: 1352.0,
        std_mhz: 32.0,
        min_mhz: 1201.0,
        max_mhz: 1558.0,
        update_hz: 1000.0,
    };

    pub fn constant(mhz: f64) -> Self {
        ClockModel {
            mean_mhz: mhz,
            std_mhz: 0.0,
            min_mhz: mhz,
            max_mhz: mhz,
            update_hz: 1000.0,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = self.min_mhz > 0.0
            && self.min_mhz <= self.mean_mhz
            && self.mean_mhz <= self.max_mhz
            && self.max_mhz.is_finite()
            && self.std_mhz >= 0.0
            && self.std_mhz.is_finite()
            && self.update_hz > 0.0
            && self.update_hz.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!(
                "clock model needs 0 < min <= mean <= max, std >= 0, update_hz > 0: {self:?}"
            )))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.std_mhz == 0.0 {
            return self.mean_mhz;
        }
        let normal = Normal::new(self.mean_mhz, self.std_mhz).expect("std validated");
        for _ in 0..64 {
            let v = normal.sample(rng);
            if (self.min_mhz..=self.max_mhz).contains(&v) {
                return v;
            }
        }
        normal.sample(rng).clamp(self.min_mhz, self.max_mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadPhase {
    pub duration_s: f64,
    pub tpa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    /// Cycled until `total_duration_s`.
    pub phases: Vec<WorkloadPhase>,
    pub total_duration_s: f64,
    pub base_interval_s: f64,
    pub clock: ClockModel,
    pub seed: u64,
    pub gpu_count: u32,
}

impl SimConfig {
    /// One GPU, one steady phase, 1 s grid.
    pub fn steady(tpa: f64, total_duration_s: f64, clock: ClockModel, seed: u64) -> Self {
        SimConfig {
            phases: vec![WorkloadPhase {
                duration_s: total_duration_s,
                tpa,
            }],
            total_duration_s,
            base_interval_s: 1.0,
            clock,
            seed,
            gpu_count: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.clock.validate()?;
        if self.phases.is_empty() {
            return Err(SimError::InvalidConfig("at least one workload phase required".into()));
        }
        for p in &self.phases {
            if !(p.duration_s > 0.0 && p.duration_s.is_finite()) || !(0.0..=1.0).contains(&p.tpa) {
                return Err(SimError::InvalidConfig(format!(
                    "phase needs duration > 0 and tpa in [0, 1]: {p:?}"
                )));
            }
        }
        if !(self.base_interval_s > 0.0 && self.base_interval_s.is_finite()) {
            return Err(SimError::InvalidConfig("base_interval_s must be positive".into()));
        }
        if !(self.total_duration_s >= self.base_interval_s && self.total_duration_s.is_finite()) {
            return Err(SimError::InvalidConfig(
                "total_duration_s must be at least base_interval_s".into(),
            ));
        }
        if self.gpu_count == 0 {
            return Err(SimError::InvalidConfig("gpu_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.total_duration_s / self.base_interval_s + 1e-9).floor() as usize
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sub-seed for stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Duration-weighted average activity of the phase schedule over `[a, b)`.
fn phase_average(phases: &[WorkloadPhase], cycle: f64, a: f64, b: f64) -> f64 {
    const EPS: f64 = 1e-9;
    let mut pos = a.rem_euclid(cycle);
    let mut idx = 0;
    while idx + 1 < phases.len() && pos >= phases[idx].duration_s - EPS {
        pos -= phases[idx].duration_s;
        idx += 1;
    }
    let pos = pos.max(0.0);
    let span = b - a;
    // Entirely inside one phase: report its value without arithmetic.
    if span <= phases[idx].duration_s - pos + EPS {
        return phases[idx].tpa;
    }
    let mut remaining = span;
    let mut integral = 0.0;
    let mut left_in_phase = phases[idx].duration_s - pos;
    while remaining > EPS {
        let take = left_in_phase.min(remaining);
        integral += take * phases[idx].tpa;
        remaining -= take;
        idx = (idx + 1) % phases.len();
        left_in_phase = phases[idx].duration_s;
    }
    integral / span
}

fn gpu_streams(config: &SimConfig) -> Vec<(String, u64)> {
    (0..config.gpu_count)
        .map(|g| (format!("gpu{g}"), derive_seed(config.seed, g as u64)))
        .collect()
}

/// Generate the base-grid trace, time-major (all GPUs at t0, then t1, ...).
///
/// Output is a pure function of the config, seed included.
pub fn simulate_counters(config: &SimConfig) -> Result<Vec<CounterSample>, SimError> {
    config.validate()?;
    let cycle: f64 = config.phases.iter().map(|p| p.duration_s).sum();
    let gpus = gpu_streams(config);
    let n = config.sample_count();
    let mut out = Vec::with_capacity(n * gpus.len());
    for i in 0..n {
        let t = i as f64 * config.base_interval_s;
        let tpa = phase_average(&config.phases, cycle, t, t + config.base_interval_s);
        let tick = (t * config.clock.update_hz + 1e-9).floor() as u64;
        for (id, gpu_seed) in &gpus {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*gpu_seed, tick));
            out.push(CounterSample {
                timestamp: t,
                gpu_id: id.clone(),
                tensor_active: tpa,
                sm_clock_mhz: config.clock.draw(&mut rng),
            });
        }
    }
    Ok(out)
}

/// Mean OFU over a generated trace, pooled over GPUs and time.
pub fn mean_ofu(samples: &[CounterSample], f_max_mhz: f64) -> Option<f64> {
    samples
        .iter()
        .map(|s| ofu_point(s, f_max_mhz).ofu)
        .collect::<MeanAccumulator>()
        .value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingStudyResult {
    pub interval_s: f64,
    /// Standard deviation of (subsampled − baseline) mean OFU, in pp.
    pub sigma_pp: f64,
    /// Half-width of the normal 95% interval, `1.96 σ`, in pp.
    pub ci95_pp: f64,
    /// Number of subsampled estimates behind the statistics.
    pub estimates: usize,
}

fn stride_for(interval_s: f64, base_s: f64) -> Result<usize, SimError> {
    let ratio = interval_s / base_s;
    let r = ratio.round();
    if !(interval_s.is_finite() && r >= 1.0 && (ratio - r).abs() <= 1e-9 * r) {
        return Err(SimError::NonMultipleInterval { interval_s, base_s });
    }
    Ok(r as usize)
}

/// Compare mean OFU from coarser scrape intervals against the base-grid mean.
///
/// Each of `replicates` seeds (derived from `config.seed`) yields one trace.
/// For an interval `r` times the base interval, every phase offset
/// `0..r` gives one subsampled mean; its deviation from the trace's full
/// mean is one estimate. σ and the 95% half-width are taken over all
/// estimates for that interval.
pub fn sampling_error_study(
    config: &SimConfig,
    intervals: &[f64],
    f_max_mhz: f64,
    replicates: usize,
) -> Result<Vec<SamplingStudyResult>, SimError> {
    config.validate()?;
    if !(f_max_mhz > 0.0) {
        return Err(SimError::InvalidConfig("f_max must be positive".into()));
    }
    if replicates == 0 {
        return Err(SimError::InvalidConfig("at least one replicate required".into()));
    }
    let strides = intervals
        .iter()
        .map(|&iv| stride_for(iv, config.base_interval_s))
        .collect::<Result<Vec<_>, _>>()?;
    let gpus = config.gpu_count as usize;

    let per_replicate: Vec<Vec<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|j| {
            let cfg = SimConfig {
                seed: derive_seed(config.seed, j as u64),
                ..config.clone()
            };
            let samples = simulate_counters(&cfg).expect("config validated");
            let ofu: Vec<f64> = samples.iter().map(|s| ofu_point(s, f_max_mhz).ofu).collect();
            let baseline = ofu.iter().copied().collect::<MeanAccumulator>().mean;
            strides
                .iter()
                .map(|&r| {
                    (0..r)
                        .filter_map(|offset| {
                            let sub: MeanAccumulator = ofu
                                .iter()
                                .enumerate()
                                .filter(|(i, _)| (i / gpus) % r == offset)
                                .map(|(_, &v)| v)
                                .collect();
                            sub.value().map(|m| (m - baseline) * 100.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    Ok(intervals
        .iter()
        .enumerate()
        .map(|(k, &interval_s)| {
            let errors: Vec<f64> = per_replicate.iter().flat_map(|rep| rep[k].iter().copied()).collect();
            let sigma_pp = population_std(&errors);
            SamplingStudyResult {
                interval_s,
                sigma_pp,
                ci95_pp: Z95 * sigma_pp,
                estimates: errors.len(),
            }
        })
        .collect())
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `interval_s,sigma_pp,ci95_pp` rows.
pub fn write_study_csv<W: Write>(results: &[SamplingStudyResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["interval_s", "sigma_pp", "ci95_pp"])?;
    for r in results {
        w.write_record([r.interval_s.to_string(), r.sigma_pp.to_string(), r.ci95_pp.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
