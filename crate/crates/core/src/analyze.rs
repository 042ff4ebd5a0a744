//! OFU vs. application-reported MFU across jobs.
//!
//! Relative error is measured against OFU, the hardware-derived side:
//! `|MFU − OFU| / OFU × 100`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::PrecisionFlops;

pub const DEFAULT_OUTLIER_THRESHOLD_PCT: f64 = 25.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzeError {
    #[error("Pearson r needs at least 2 jobs, got {0}")]
    TooFewJobs(usize),
    #[error("Pearson r undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("relative error undefined for job {0}: OFU is zero")]
    ZeroOfu(String),
    #[error("reference throughput must be positive")]
    ZeroReference,
    #[error("correction factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("invalid job record {job_id}: {reason}")]
    InvalidJob { job_id: String, reason: String },
    #[error("{0}")]
    Csv(String),
    #[error("{0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub gpu_count: u32,
    pub app_mfu_pct: f64,
    pub ofu_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_mix: Option<Vec<PrecisionFlops>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

impl JobRecord {
    pub fn new(job_id: impl Into<String>, gpu_count: u32, app_mfu_pct: f64, ofu_pct: f64) -> Self {
        JobRecord {
            job_id: job_id.into(),
            gpu_count,
            app_mfu_pct,
            ofu_pct,
            precision_mix: None,
            user: None,
        }
    }

    pub fn validate(&self) -> Result<(), AnalyzeError> {
        let bad = |reason: &str| {
            Err(AnalyzeError::InvalidJob {
                job_id: self.job_id.clone(),
                reason: reason.into(),
            })
        };
        if self.gpu_count == 0 {
            return bad("gpu_count must be >= 1");
        }
        if !(self.app_mfu_pct >= 0.0 && self.app_mfu_pct.is_finite()) {
            return bad("app_mfu_pct must be finite and >= 0");
        }
        if !(self.ofu_pct >= 0.0 && self.ofu_pct.is_finite()) {
            return bad("ofu_pct must be finite and >= 0");
        }
        Ok(())
    }

    pub fn abs_error_pp(&self) -> f64 {
        (self.app_mfu_pct - self.ofu_pct).abs()
    }
}

pub fn relative_error_pct(app_mfu_pct: f64, ofu_pct: f64) -> Option<f64> {
    (ofu_pct != 0.0).then(|| (app_mfu_pct - ofu_pct).abs() / ofu_pct * 100.0)
}

/// Pearson correlation via single-pass co-moment updates.
pub fn pearson_r(pairs: &[(f64, f64)]) -> Result<f64, AnalyzeError> {
    if pairs.len() < 2 {
        return Err(AnalyzeError::TooFewJobs(pairs.len()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &(x, y)) in pairs.iter().enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 {
        return Err(AnalyzeError::ZeroVariance("app_mfu"));
    }
    if syy <= 0.0 {
        return Err(AnalyzeError::ZeroVariance("ofu"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketShare {
    pub threshold_pp: f64,
    pub fraction: f64,
}

/// Absolute-error thresholds for bucketing, in percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketPolicy {
    /// Cumulative `<= t` buckets, ascending.
    pub le: Vec<f64>,
    /// Tail `> t` bucket.
    pub gt: f64,
}

impl Default for BucketPolicy {
    fn default() -> Self {
        BucketPolicy {
            le: vec![2.0, 5.0, 10.0],
            gt: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub job_id: String,
    pub relative_error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub job_count: usize,
    /// Absent when fewer than two jobs or either side has zero variance.
    pub pearson_r: Option<f64>,
    pub pearson_note: Option<String>,
    pub mae_pp: Option<f64>,
    pub buckets_le: Vec<BucketShare>,
    pub bucket_gt: BucketShare,
    pub outlier_threshold_pct: f64,
    pub outliers: Vec<Outlier>,
    /// Jobs skipped from outlier screening because OFU is zero.
    pub zero_ofu_jobs: Vec<String>,
}

impl DivergenceReport {
    pub fn bucket_le(&self, threshold_pp: f64) -> Option<f64> {
        self.buckets_le
            .iter()
            .find(|b| b.threshold_pp == threshold_pp)
            .map(|b| b.fraction)
    }
}

pub fn divergence_report(jobs: &[JobRecord], outlier_threshold_pct: f64) -> DivergenceReport {
    divergence_report_with(jobs, outlier_threshold_pct, &BucketPolicy::default())
}

pub fn divergence_report_with(jobs: &[JobRecord], outlier_threshold_pct: f64, policy: &BucketPolicy) -> DivergenceReport {
    let n = jobs.len();
    let pairs: Vec<(f64, f64)> = jobs.iter().map(|j| (j.app_mfu_pct, j.ofu_pct)).collect();
    let (pearson_r, pearson_note) = match pearson_r(&pairs) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let errors: Vec<f64> = jobs.iter().map(JobRecord::abs_error_pp).collect();
    let mae_pp = (n > 0).then(|| errors.iter().sum::<f64>() / n as f64);
    let share = |pred: &dyn Fn(f64) -> bool| {
        if n == 0 {
            0.0
        } else {
            errors.iter().filter(|&&e| pred(e)).count() as f64 / n as f64
        }
    };
    let buckets_le = policy
        .le
        .iter()
        .map(|&t| BucketShare {
            threshold_pp: t,
            fraction: share(&|e| e <= t),
        })
        .collect();
    let bucket_gt = BucketShare {
        threshold_pp: policy.gt,
        fraction: share(&|e| e > policy.gt),
    };

    let mut outliers = Vec::new();
    let mut zero_ofu_jobs = Vec::new();
    for j in jobs {
        match relative_error_pct(j.app_mfu_pct, j.ofu_pct) {
            Some(rel) if rel > outlier_threshold_pct => outliers.push(Outlier {
                job_id: j.job_id.clone(),
                relative_error_pct: rel,
            }),
            Some(_) => {}
            None => zero_ofu_jobs.push(j.job_id.clone()),
        }
    }
    outliers.sort_by(|a, b| b.relative_error_pct.total_cmp(&a.relative_error_pct));

    DivergenceReport {
        job_count: n,
        pearson_r,
        pearson_note,
        mae_pp,
        buckets_le,
        bucket_gt,
        outlier_threshold_pct,
        outliers,
        zero_ofu_jobs,
    }
}

pub fn exclude_and_recompute(
    jobs: &[JobRecord],
    excluded_ids: &HashSet<String>,
    outlier_threshold_pct: f64,
) -> DivergenceReport {
    let kept: Vec<JobRecord> = jobs
        .iter()
        .filter(|j| !excluded_ids.contains(&j.job_id))
        .cloned()
        .collect();
    divergence_report(&kept, outlier_threshold_pct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGroup {
    pub gpu_count: u32,
    pub jobs: usize,
    pub mean_mfu_pct: f64,
    pub std_mfu_pct: f64,
    pub mean_abs_err_pp: f64,
    pub std_abs_err_pp: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One group per distinct GPU count, ascending. Standard deviations are
/// population (÷N).
pub fn group_by_scale(jobs: &[JobRecord]) -> Vec<ScaleGroup> {
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for j in jobs {
        let g = groups.entry(j.gpu_count).or_default();
        g.0.push(j.app_mfu_pct);
        g.1.push(j.abs_error_pp());
    }
    groups
        .into_iter()
        .map(|(gpu_count, (mfu, err))| {
            let (mean_mfu_pct, std_mfu_pct) = mean_std(&mfu);
            let (mean_abs_err_pp, std_abs_err_pp) = mean_std(&err);
            ScaleGroup {
                gpu_count,
                jobs: mfu.len(),
                mean_mfu_pct,
                std_mfu_pct,
                mean_abs_err_pp,
                std_abs_err_pp,
            }
        })
        .collect()
}

/// `(OFU_p × Peak_p) / (OFU_ref × Peak_ref)`: achieved throughput in one
/// precision relative to a reference precision.
pub fn ofu_derived_speedup(ofu_p: f64, peak_p: f64, ofu_ref: f64, peak_ref: f64) -> Result<f64, AnalyzeError> {
    if !(ofu_ref > 0.0 && peak_ref > 0.0) {
        return Err(AnalyzeError::ZeroReference);
    }
    Ok((ofu_p * peak_p) / (ofu_ref * peak_ref))
}

/// Divide reported MFU by `factor`.
///
/// `factor > 1` removes FLOPs over-counting (a job that counted 3× the real
/// work passes 3). `factor < 1` restores under-counted work: with full
/// activation recomputation the true work is 4F while 3F was counted, so
/// pass `3/4`.
pub fn apply_flops_correction(mfu_pct: f64, factor: f64) -> Result<f64, AnalyzeError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AnalyzeError::NonPositiveFactor(factor));
    }
    Ok(mfu_pct / factor)
}

#[derive(Debug, Deserialize)]
struct JobCsvRow {
    job_id: String,
    gpu_count: u32,
    app_mfu_pct: f64,
    ofu_pct: f64,
    #[serde(default)]
    user: Option<String>,
}

/// Jobs from CSV with header `job_id,gpu_count,app_mfu_pct,ofu_pct[,user]`.
pub fn load_jobs_csv<R: Read>(input: R) -> Result<Vec<JobRecord>, AnalyzeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<JobCsvRow>() {
        let row = row.map_err(|e| AnalyzeError::Csv(e.to_string()))?;
        let job = JobRecord {
            job_id: row.job_id,
            gpu_count: row.gpu_count,
            app_mfu_pct: row.app_mfu_pct,
            ofu_pct: row.ofu_pct,
            precision_mix: None,
            user: row.user.filter(|u| !u.is_empty()),
        };
        job.validate()?;
        out.push(job);
    }
    Ok(out)
}

/// Jobs from a JSON array of records; supports `precision_mix`.
pub fn load_jobs_json<R: Read>(input: R) -> Result<Vec<JobRecord>, AnalyzeError> {
    let jobs: Vec<JobRecord> = serde_json::from_reader(input).map_err(|e| AnalyzeError::Json(e.to_string()))?;
    for j in &jobs {
        j.validate()?;
    }
    Ok(jobs)
}

/// `gpus,jobs,mean_mfu,std_mfu,mean_abs_err,std_abs_err` rows.
pub fn write_scale_csv<W: Write>(groups: &[ScaleGroup], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gpus", "jobs", "mean_mfu", "std_mfu", "mean_abs_err", "std_abs_err"])?;
    for g in groups {
        w.write_record([
            g.gpu_count.to_string(),
            g.jobs.to_string(),
            g.mean_mfu_pct.to_string(),
            g.std_mfu_pct.to_string(),
            g.mean_abs_err_pp.to_string(),
            g.std_abs_err_pp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
