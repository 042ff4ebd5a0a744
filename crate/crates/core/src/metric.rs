//! OFU from counter samples, job-level aggregation, application MFU and
//! mixed-precision effective peaks.
//!
//! Per sample, `OFU = TPA × f_SM / f_max`: tensor-pipe activity scaled by how
//! close the SM clock ran to the maximum tensor-pipe clock.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::archdb::Precision;

/// Above this inferred scrape interval the tensor-activity counter reports an
/// average of averages.
pub const MAX_COLLECTION_INTERVAL_S: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid counter sample: {0}")]
    InvalidSample(String),
    #[error("window [{start}, {end}) is empty")]
    InvalidWindow { start: f64, end: f64 },
    #[error("no samples retained in window [{start}, {end})")]
    EmptyWindow { start: f64, end: f64 },
    #[error("precision mix has no entry with positive FLOPs")]
    EmptyMix,
    #[error("invalid precision mix entry for {precision}: {reason}")]
    InvalidMixEntry { precision: Precision, reason: String },
    #[error("peak throughput must be positive, got {0}")]
    NonPositivePeak(f64),
    #[error("gpu_count must be at least 1")]
    ZeroGpuCount,
}

/// One (tensor activity, SM clock) reading from one GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterSample {
    pub timestamp: f64,
    pub gpu_id: String,
    pub tensor_active: f64,
    pub sm_clock_mhz: f64,
}

impl CounterSample {
    pub fn new(
        timestamp: f64,
        gpu_id: impl Into<String>,
        tensor_active: f64,
        sm_clock_mhz: f64,
    ) -> Result<Self, MetricError> {
        let s = CounterSample {
            timestamp,
            gpu_id: gpu_id.into(),
            tensor_active,
            sm_clock_mhz,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if !self.timestamp.is_finite() {
            return Err(MetricError::InvalidSample(format!("non-finite timestamp {}", self.timestamp)));
        }
        if !(0.0..=1.0).contains(&self.tensor_active) {
            return Err(MetricError::InvalidSample(format!(
                "tensor_active {} outside [0, 1]",
                self.tensor_active
            )));
        }
        if !(self.sm_clock_mhz > 0.0 && self.sm_clock_mhz.is_finite()) {
            return Err(MetricError::InvalidSample(format!(
                "sm_clock_mhz {} must be positive",
                self.sm_clock_mhz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OfuPoint {
    pub timestamp: f64,
    pub gpu_id: String,
    pub ofu: f64,
    /// The sampled clock was above the declared `f_max`; OFU is left
    /// unclamped so a wrong architecture entry stays visible.
    pub clock_above_max: bool,
}

/// Panics if `f_max_mhz` is not positive.
pub fn ofu_point(sample: &CounterSample, f_max_mhz: f64) -> OfuPoint {
    assert!(f_max_mhz > 0.0, "f_max must be positive, got {f_max_mhz}");
    OfuPoint {
        timestamp: sample.timestamp,
        gpu_id: sample.gpu_id.clone(),
        ofu: sample.tensor_active * sample.sm_clock_mhz / f_max_mhz,
        clock_above_max: sample.sm_clock_mhz > f_max_mhz,
    }
}

/// Running arithmetic mean.
///
/// Updates as `m += (x - m) / n`, so a run of identical values yields that
/// value bit-exactly. Partial means merge by count weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeanAccumulator {
    pub count: u64,
    pub mean: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        self.mean += (other.mean - self.mean) * (other.count as f64 / total as f64);
        self.count = total;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanAccumulator::default();
        iter.into_iter().for_each(|x| acc.push(x));
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregateWarning {
    ClockAboveMax { points: u64 },
    CoarseInterval { interval_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuMean {
    pub mean_ofu: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobAggregate {
    pub job_id: String,
    pub gpu_count: usize,
    pub window: (f64, f64),
    pub mean_ofu: f64,
    pub sample_count: u64,
    /// Median gap between consecutive samples of the same GPU.
    pub collection_interval: Option<f64>,
    pub per_gpu: BTreeMap<String, GpuMean>,
    pub warnings: Vec<AggregateWarning>,
}

/// Mean OFU over points with `start <= timestamp < end` whose GPU is in
/// `gpu_set` (all GPUs when empty). Every retained point has equal weight.
pub fn aggregate_job<'a, I>(
    job_id: &str,
    points: I,
    window: (f64, f64),
    gpu_set: &HashSet<String>,
) -> Result<JobAggregate, MetricError>
where
    I: IntoIterator<Item = &'a OfuPoint>,
{
    let (start, end) = window;
    if !(end > start) {
        return Err(MetricError::InvalidWindow { start, end });
    }
    let mut total = MeanAccumulator::default();
    let mut per_gpu: BTreeMap<String, (MeanAccumulator, Vec<f64>)> = BTreeMap::new();
    let mut above_max = 0u64;
    for p in points {
        if p.timestamp < start || p.timestamp >= end {
            continue;
        }
        if !gpu_set.is_empty() && !gpu_set.contains(&p.gpu_id) {
            continue;
        }
        total.push(p.ofu);
        if p.clock_above_max {
            above_max += 1;
        }
        let entry = per_gpu.entry(p.gpu_id.clone()).or_default();
        entry.0.push(p.ofu);
        entry.1.push(p.timestamp);
    }
    let Some(mean_ofu) = total.value() else {
        return Err(MetricError::EmptyWindow { start, end });
    };

    let mut gaps = Vec::new();
    for (_, ts) in per_gpu.values_mut() {
        ts.sort_by(f64::total_cmp);
        gaps.extend(ts.windows(2).map(|w| w[1] - w[0]));
    }
    let collection_interval = median(&mut gaps);

    let mut warnings = Vec::new();
    if above_max > 0 {
        warnings.push(AggregateWarning::ClockAboveMax { points: above_max });
    }
    if let Some(iv) = collection_interval {
        if iv > MAX_COLLECTION_INTERVAL_S {
            warnings.push(AggregateWarning::CoarseInterval { interval_s: iv });
        }
    }

    Ok(JobAggregate {
        job_id: job_id.to_string(),
        gpu_count: per_gpu.len(),
        window,
        mean_ofu,
        sample_count: total.count,
        collection_interval,
        per_gpu: per_gpu
            .into_iter()
            .map(|(id, (acc, _))| {
                (
                    id,
                    GpuMean {
                        mean_ofu: acc.mean,
                        sample_count: acc.count,
                    },
                )
            })
            .collect(),
        warnings,
    })
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    })
}

/// FLOPs executed in one precision and that precision's peak (TFLOP/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct PrecisionFlops {
    pub precision: Precision,
    pub flops: f64,
    pub peak_tflops: f64,
}

/// FLOPs-weighted harmonic mean of per-precision peaks: `ΣF / Σ(F/P)`.
pub fn effective_peak(mix: &[PrecisionFlops]) -> Result<f64, MetricError> {
    let mut total_flops = 0.0;
    let mut total_time = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in mix {
        if !(e.flops >= 0.0 && e.flops.is_finite()) {
            return Err(MetricError::InvalidMixEntry {
                precision: e.precision,
                reason: format!("flops {} must be finite and nonnegative", e.flops),
            });
        }
        if !(e.peak_tflops > 0.0 && e.peak_tflops.is_finite()) {
            return Err(MetricError::InvalidMixEntry {
                precision: e.precision,
                reason: format!("peak {} must be positive", e.peak_tflops),
            });
        }
        if e.flops > 0.0 {
            lo = lo.min(e.peak_tflops);
            hi = hi.max(e.peak_tflops);
        }
        total_flops += e.flops;
        total_time += e.flops / e.peak_tflops;
    }
    if total_flops <= 0.0 {
        return Err(MetricError::EmptyMix);
    }
    // Rounding can push the quotient an ulp outside the peaks it averages.
    Ok((total_flops / total_time).clamp(lo, hi))
}

/// Application MFU in percent: achieved job throughput over the job's
/// aggregate peak.
///
/// Megatron-style reporting prints this as
/// `MFU = train_tflop × gpu_count / 989 × 100%`; the units of `train_tflop`
/// are left unstated there. Here `achieved_tflops_total` is the whole job's
/// achieved TFLOP/s.
pub fn app_mfu(achieved_tflops_total: f64, gpu_count: u32, peak_per_gpu: f64) -> Result<f64, MetricError> {
    if gpu_count == 0 {
        return Err(MetricError::ZeroGpuCount);
    }
    if !(peak_per_gpu > 0.0 && peak_per_gpu.is_finite()) {
        return Err(MetricError::NonPositivePeak(peak_per_gpu));
    }
    Ok(achieved_tflops_total / (gpu_count as f64 * peak_per_gpu) * 100.0)
}
