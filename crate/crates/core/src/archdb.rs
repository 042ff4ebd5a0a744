//! GPU architecture parameters and theoretical tensor-core peak throughput.
//!
//! Peak throughput for a precision is `SMs × FLOPs/cycle/SM × f_max / 10^12`,
//! where `f_max` is the maximum clock of the tensor pipeline for that
//! precision. On some parts (H100 SXM) the tensor pipeline for low-precision
//! formats boosts lower than the SM clock, so the clock is tracked per
//! precision rather than once per architecture.
//!
//! # Spec document grammar
//!
//! Architecture databases are TOML documents holding an array of `arch`
//! tables:
//!
//! ```toml
//! [[arch]]
//! name = "H100-SXM"
//! sm_count = 132
//! sm_boost_clock_mhz = 1980.0
//! rated_precision = "FP16"     # optional, together with rated_tflops
//! rated_tflops = 989.0         # published datasheet rating
//!
//! [arch.precisions.FP16]
//! tensor_clock_mhz = 1830.0
//! flops_per_cycle_per_sm = 4096
//! ```
//!
//! Precision keys are `FP64`, `FP32`, `TF32`, `BF16`, `FP16`, `FP8`, `NVFP4`.
//! An empty document is an empty database.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_DB: &str = include_str!("builtin_arch.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("architecture {arch} has no tensor-pipe entry for {precision}")]
    MissingPrecision { arch: String, precision: Precision },
    #[error("scaling ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("architecture {arch}: invariant violated: {check}")]
    InvariantViolation { arch: String, check: String },
    #[error("unknown architecture {0}")]
    UnknownArch(String),
    #[error("unknown precision {0}")]
    UnknownPrecision(String),
}

/// Numeric formats executed on the tensor pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Precision {
    FP64,
    FP32,
    TF32,
    BF16,
    FP16,
    FP8,
    NVFP4,
}

impl Precision {
    pub const ALL: [Precision; 7] = [
        Precision::FP64,
        Precision::FP32,
        Precision::TF32,
        Precision::BF16,
        Precision::FP16,
        Precision::FP8,
        Precision::NVFP4,
    ];

    /// Storage width in bits. TF32 occupies FP32 storage.
    pub fn element_bits(self) -> u32 {
        match self {
            Precision::FP64 => 64,
            Precision::FP32 | Precision::TF32 => 32,
            Precision::BF16 | Precision::FP16 => 16,
            Precision::FP8 => 8,
            Precision::NVFP4 => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Precision::FP64 => "FP64",
            Precision::FP32 => "FP32",
            Precision::TF32 => "TF32",
            Precision::BF16 => "BF16",
            Precision::FP16 => "FP16",
            Precision::FP8 => "FP8",
            Precision::NVFP4 => "NVFP4",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Precision {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Precision::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ArchError::UnknownPrecision(s.to_string()))
    }
}

/// Clock and per-SM rate of the tensor pipeline for one precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorPipe {
    pub tensor_clock_mhz: f64,
    pub flops_per_cycle_per_sm: u64,
}

/// Vendor-published peak for one precision, used as the base that other
/// precisions scale from in [`peak_table`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatedPeak {
    pub precision: Precision,
    pub tflops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuArchitecture {
    pub name: String,
    pub sm_count: u32,
    pub sm_boost_clock_mhz: f64,
    pub precisions: BTreeMap<Precision, TensorPipe>,
    pub rated: Option<RatedPeak>,
}

impl GpuArchitecture {
    pub fn pipe(&self, precision: Precision) -> Result<&TensorPipe, ArchError> {
        self.precisions
            .get(&precision)
            .ok_or_else(|| ArchError::MissingPrecision {
                arch: self.name.clone(),
                precision,
            })
    }

    /// Maximum tensor-pipe clock for `precision`; the `f_max` used by OFU.
    pub fn tensor_clock_mhz(&self, precision: Precision) -> Result<f64, ArchError> {
        self.pipe(precision).map(|p| p.tensor_clock_mhz)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let fail = |check: String| {
            Err(ArchError::InvariantViolation {
                arch: self.name.clone(),
                check,
            })
        };
        if self.name.trim().is_empty() {
            return fail("name must be nonempty".into());
        }
        if self.sm_count == 0 {
            return fail("sm_count must be > 0".into());
        }
        if !(self.sm_boost_clock_mhz > 0.0 && self.sm_boost_clock_mhz.is_finite()) {
            return fail("sm_boost_clock_mhz must be > 0".into());
        }
        for (p, pipe) in &self.precisions {
            if !(pipe.tensor_clock_mhz > 0.0 && pipe.tensor_clock_mhz.is_finite()) {
                return fail(format!("{p}: tensor_clock_mhz must be > 0"));
            }
            if pipe.flops_per_cycle_per_sm == 0 {
                return fail(format!("{p}: flops_per_cycle_per_sm must be > 0"));
            }
            if pipe.tensor_clock_mhz > self.sm_boost_clock_mhz {
                return fail(format!(
                    "{p}: tensor_clock_mhz {} exceeds sm_boost_clock_mhz {}",
                    pipe.tensor_clock_mhz, self.sm_boost_clock_mhz
                ));
            }
        }
        // Per-SM rate scales with element width within the low-precision family.
        let fpc = |p| self.precisions.get(&p).map(|x| x.flops_per_cycle_per_sm);
        let ratios = [
            (Precision::FP16, Precision::FP8, 2, 1),
            (Precision::FP16, Precision::TF32, 1, 2),
            (Precision::FP16, Precision::BF16, 1, 1),
            (Precision::FP8, Precision::NVFP4, 2, 1),
        ];
        for (base, other, num, den) in ratios {
            if let (Some(b), Some(o)) = (fpc(base), fpc(other)) {
                if o * den != b * num {
                    return fail(format!(
                        "{other} flops_per_cycle_per_sm {o} must be {num}/{den} x {base} ({b})"
                    ));
                }
            }
        }
        if let Some(r) = self.rated {
            if !(r.tflops > 0.0 && r.tflops.is_finite()) {
                return fail("rated_tflops must be > 0".into());
            }
            if !self.precisions.contains_key(&r.precision) {
                return fail(format!("rated_precision {} has no tensor-pipe entry", r.precision));
            }
        }
        Ok(())
    }
}

/// How a [`PeakThroughput`] value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakBasis {
    /// `SMs × FLOPs/cycle/SM × f_max`.
    Derived,
    /// Published rating of another precision times the per-SM rate ratio.
    ScaledFromRating,
    /// Caller-supplied scaling of another peak.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakThroughput {
    pub architecture: String,
    pub precision: Precision,
    pub tflops: f64,
    pub basis: PeakBasis,
}

pub fn peak_tflops(arch: &GpuArchitecture, precision: Precision) -> Result<PeakThroughput, ArchError> {
    let pipe = arch.pipe(precision)?;
    let flops_per_s = arch.sm_count as f64 * pipe.flops_per_cycle_per_sm as f64 * pipe.tensor_clock_mhz * 1e6;
    Ok(PeakThroughput {
        architecture: arch.name.clone(),
        precision,
        tflops: flops_per_s / 1e12,
        basis: PeakBasis::Derived,
    })
}

pub fn scaled_peak(base: &PeakThroughput, ratio: f64, precision: Precision) -> Result<PeakThroughput, ArchError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(ArchError::NonPositiveRatio(ratio));
    }
    Ok(PeakThroughput {
        architecture: base.architecture.clone(),
        precision,
        tflops: base.tflops * ratio,
        basis: PeakBasis::Scaled,
    })
}

fn rate_ratio(pipe: &TensorPipe, base: &TensorPipe) -> f64 {
    (pipe.flops_per_cycle_per_sm as f64 * pipe.tensor_clock_mhz)
        / (base.flops_per_cycle_per_sm as f64 * base.tensor_clock_mhz)
}

/// Peak for every precision the architecture supports, in precision order.
///
/// When the architecture carries a published rating, the rated precision
/// reports its derived value and every other precision scales from the
/// published number by the ratio of per-SM rate × tensor clock. Precisions
/// running at the rated precision's exact rate share its derived value.
/// Without a rating every entry is derived directly.
pub fn peak_table(arch: &GpuArchitecture) -> Result<Vec<PeakThroughput>, ArchError> {
    let mut out = Vec::with_capacity(arch.precisions.len());
    for (&p, pipe) in &arch.precisions {
        let derived = peak_tflops(arch, p)?;
        let entry = match arch.rated {
            Some(r) if r.precision != p && rate_ratio(pipe, arch.pipe(r.precision)?) != 1.0 => {
                let ratio = rate_ratio(pipe, arch.pipe(r.precision)?);
                let base = PeakThroughput {
                    architecture: arch.name.clone(),
                    precision: r.precision,
                    tflops: r.tflops,
                    basis: PeakBasis::Derived,
                };
                let mut scaled = scaled_peak(&base, ratio, p)?;
                scaled.basis = PeakBasis::ScaledFromRating;
                scaled
            }
            _ => derived,
        };
        out.push(entry);
    }
    Ok(out)
}

/// Immutable set of architectures keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArchDb {
    archs: Vec<GpuArchitecture>,
}

impl ArchDb {
    pub fn builtin() -> Self {
        let archs = load_arch_specs(BUILTIN_DB).expect("built-in architecture database is valid");
        ArchDb { archs }
    }

    pub fn from_archs(archs: Vec<GpuArchitecture>) -> Result<Self, ArchError> {
        for a in &archs {
            a.validate()?;
        }
        Ok(ArchDb { archs })
    }

    pub fn parse(source: &str) -> Result<Self, ArchError> {
        Ok(ArchDb {
            archs: load_arch_specs(source)?,
        })
    }

    pub fn get(&self, name: &str) -> Result<&GpuArchitecture, ArchError> {
        self.archs
            .iter()
            .find(|a| a.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| ArchError::UnknownArch(name.to_string()))
    }

    pub fn archs(&self) -> &[GpuArchitecture] {
        &self.archs
    }

    pub fn to_toml(&self) -> String {
        serialize_arch_specs(&self.archs)
    }
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    #[serde(default)]
    arch: Vec<ArchRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchRecord {
    name: String,
    sm_count: u32,
    sm_boost_clock_mhz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rated_precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rated_tflops: Option<f64>,
    #[serde(default)]
    precisions: BTreeMap<Precision, TensorPipe>,
}

pub fn load_arch_specs(source: &str) -> Result<Vec<GpuArchitecture>, ArchError> {
    let doc: SpecDocument = toml::from_str(source).map_err(|e| {
        let offset = e.span().map(|s| s.start).unwrap_or(0).min(source.len());
        let (line, column) = line_col(source, offset);
        ArchError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let mut out = Vec::with_capacity(doc.arch.len());
    for rec in doc.arch {
        let rated = match (rec.rated_precision, rec.rated_tflops) {
            (Some(precision), Some(tflops)) => Some(RatedPeak { precision, tflops }),
            (None, None) => None,
            _ => {
                return Err(ArchError::InvariantViolation {
                    arch: rec.name,
                    check: "rated_precision and rated_tflops must be given together".into(),
                })
            }
        };
        let arch = GpuArchitecture {
            name: rec.name,
            sm_count: rec.sm_count,
            sm_boost_clock_mhz: rec.sm_boost_clock_mhz,
            precisions: rec.precisions,
            rated,
        };
        arch.validate()?;
        if out.iter().any(|a: &GpuArchitecture| a.name == arch.name) {
            return Err(ArchError::InvariantViolation {
                arch: arch.name,
                check: "duplicate architecture name".into(),
            });
        }
        out.push(arch);
    }
    Ok(out)
}

pub fn serialize_arch_specs(archs: &[GpuArchitecture]) -> String {
    let doc = SpecDocument {
        arch: archs
            .iter()
            .map(|a| ArchRecord {
                name: a.name.clone(),
                sm_count: a.sm_count,
                sm_boost_clock_mhz: a.sm_boost_clock_mhz,
                rated_precision: a.rated.map(|r| r.precision),
                rated_tflops: a.rated.map(|r| r.tflops),
                precisions: a.precisions.clone(),
            })
            .collect(),
    };
    toml::to_string(&doc).expect("architecture records serialize")
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let before = &source.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let column = offset - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}
