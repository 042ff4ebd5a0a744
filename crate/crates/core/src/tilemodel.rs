//! GEMM tile quantization.
//!
//! A GEMM kernel splits the `M × N` output into `T_M × T_N` tiles and walks
//! `K` in `T_K` steps; partial tiles are zero-padded and computed in full.
//! Cluster-launched kernels additionally round the tile count along M and N
//! up to a whole number of `C_M × C_N` clusters, so
//!
//! ```text
//! M_eff = ceil(ceil(M / T_M) / C_M) * C_M * T_M      (same for N)
//! K_eff = ceil(K / T_K) * T_K
//! ```
//!
//! and the hardware executes `2 · M_eff · N_eff · K_eff` FLOPs.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::archdb::Precision;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TileError {
    #[error("GEMM dimensions must be >= 1, got m={m} k={k} n={n}")]
    InvalidShape { m: u64, k: u64, n: u64 },
    #[error("tile and cluster dimensions must be >= 1")]
    InvalidConfig,
    #[error("executed FLOPs {executed} below theoretical {theoretical}")]
    UnderTheoretic { executed: u128, theoretical: u128 },
    #[error("executed FLOPs must be positive")]
    NonPositiveFlops,
    #[error("{0:?} kernel names do not expose tile geometry; supply measured FLOPs instead")]
    TilesUnavailable(KernelFamily),
}

/// `C = A × B` with `A: M × K` and `B: K × N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct GemmShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl GemmShape {
    pub fn new(m: u64, k: u64, n: u64) -> Result<Self, TileError> {
        if m == 0 || k == 0 || n == 0 {
            return Err(TileError::InvalidShape { m, k, n });
        }
        Ok(GemmShape { m, k, n })
    }

    pub fn square(n: u64) -> Result<Self, TileError> {
        Self::new(n, n, n)
    }

    pub fn theoretical_flops(&self) -> u128 {
        2 * self.m as u128 * self.n as u128 * self.k as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TileConfig {
    pub t_m: u64,
    pub t_n: u64,
    pub t_k: u64,
    pub c_m: u64,
    pub c_n: u64,
}

impl TileConfig {
    /// Used when the kernel geometry is unknown.
    pub const DEFAULT: TileConfig = TileConfig {
        t_m: 128,
        t_n: 128,
        t_k: 64,
        c_m: 1,
        c_n: 1,
    };

    pub fn new(t_m: u64, t_n: u64, t_k: u64, c_m: u64, c_n: u64) -> Result<Self, TileError> {
        let c = TileConfig { t_m, t_n, t_k, c_m, c_n };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TileError> {
        if [self.t_m, self.t_n, self.t_k, self.c_m, self.c_n].contains(&0) {
            return Err(TileError::InvalidConfig);
        }
        Ok(())
    }

    /// Representative tile per precision: 128×128×64 for 16-bit and TF32
    /// work, wider N and deeper K for the block-scaled formats.
    pub fn representative(precision: Precision) -> TileConfig {
        match precision {
            Precision::FP8 => TileConfig {
                t_m: 128,
                t_n: 256,
                t_k: 128,
                c_m: 1,
                c_n: 1,
            },
            Precision::NVFP4 => TileConfig {
                t_m: 128,
                t_n: 256,
                t_k: 256,
                c_m: 1,
                c_n: 1,
            },
            _ => TileConfig::DEFAULT,
        }
    }

    /// Distinct representative configs across all precisions.
    pub fn default_set() -> Vec<TileConfig> {
        let mut set: Vec<TileConfig> = Vec::new();
        for p in Precision::ALL {
            let c = TileConfig::representative(p);
            if !set.contains(&c) {
                set.push(c);
            }
        }
        set
    }
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} cga {}x{}",
            self.t_m, self.t_n, self.t_k, self.c_m, self.c_n
        )
    }
}

fn pad_two_level(dim: u64, tile: u64, cluster: u64) -> u64 {
    dim.div_ceil(tile).div_ceil(cluster) * cluster * tile
}

/// `(M_eff, N_eff, K_eff)`. K has no cluster-level rounding.
pub fn effective_dims(shape: &GemmShape, config: &TileConfig) -> (u64, u64, u64) {
    (
        pad_two_level(shape.m, config.t_m, config.c_m),
        pad_two_level(shape.n, config.t_n, config.c_n),
        shape.k.div_ceil(config.t_k) * config.t_k,
    )
}

/// Extra work beyond `2MNK`, in percent.
pub fn overhead(shape: &GemmShape, executed_flops: u128) -> Result<f64, TileError> {
    let theoretical = shape.theoretical_flops();
    if executed_flops < theoretical {
        return Err(TileError::UnderTheoretic {
            executed: executed_flops,
            theoretical,
        });
    }
    Ok((executed_flops - theoretical) as f64 / theoretical as f64 * 100.0)
}

/// Where the tile geometry behind an estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    /// Supplied by the caller.
    Supplied,
    /// Decoded from an nvJet kernel name.
    KernelName,
    /// No geometry known; [`TileConfig::DEFAULT`] assumed. The estimate is
    /// modeled rather than measured.
    Defaulted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub shape: GemmShape,
    pub config: TileConfig,
    pub effective_m: u64,
    pub effective_n: u64,
    pub effective_k: u64,
    pub model_flops: u128,
    pub overhead_pct: f64,
    pub source: ConfigSource,
}

pub fn predict_flops(shape: &GemmShape, config: &TileConfig) -> FlopsEstimate {
    let (effective_m, effective_n, effective_k) = effective_dims(shape, config);
    let model_flops = 2 * effective_m as u128 * effective_n as u128 * effective_k as u128;
    let overhead_pct = overhead(shape, model_flops).expect("padded dims cover the shape");
    FlopsEstimate {
        shape: *shape,
        config: *config,
        effective_m,
        effective_n,
        effective_k,
        model_flops,
        overhead_pct,
        source: ConfigSource::Supplied,
    }
}

pub fn predict_flops_default(shape: &GemmShape) -> FlopsEstimate {
    FlopsEstimate {
        source: ConfigSource::Defaulted,
        ..predict_flops(shape, &TileConfig::DEFAULT)
    }
}

/// Prediction from a decoded kernel name. Only nvJet names carry enough
/// geometry; XMMA and CUTLASS kernels need measured FLOPs.
pub fn predict_flops_for_kernel(shape: &GemmShape, kernel: &KernelDescriptor) -> Result<FlopsEstimate, TileError> {
    match kernel.tiles {
        Some(tiles) => Ok(FlopsEstimate {
            source: ConfigSource::KernelName,
            ..predict_flops(shape, &tiles)
        }),
        None => Err(TileError::TilesUnavailable(kernel.family)),
    }
}

/// Rescale OFU by `2MNK / executed` to remove padded work.
pub fn adjust_ofu(ofu: f64, shape: &GemmShape, executed_flops: u128) -> Result<f64, TileError> {
    if executed_flops == 0 {
        return Err(TileError::NonPositiveFlops);
    }
    Ok(ofu * (shape.theoretical_flops() as f64 / executed_flops as f64))
}

/// Inverse of [`adjust_ofu`].
pub fn unadjust_ofu(adjusted: f64, shape: &GemmShape, executed_flops: u128) -> Result<f64, TileError> {
    if executed_flops == 0 {
        return Err(TileError::NonPositiveFlops);
    }
    Ok(adjusted * (executed_flops as f64 / shape.theoretical_flops() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum KernelFamily {
    NvJet,
    Xmma,
    Cutlass2,
    Cutlass3,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KernelDescriptor {
    pub family: KernelFamily,
    pub arch_tag: Option<String>,
    pub precision_tag: Option<String>,
    /// Present exactly for decodable nvJet names.
    pub tiles: Option<TileConfig>,
    /// Second field of the `T_K x S` group. Recorded, not used in FLOP math.
    pub stages: Option<u64>,
    pub raw_name: String,
    #[serde(skip)]
    nvjet: Option<NvJetParts>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NvJetParts {
    head: Vec<String>,
    tail: Vec<String>,
}

impl KernelDescriptor {
    fn other(family: KernelFamily, name: &str) -> Self {
        KernelDescriptor {
            family,
            arch_tag: name.split('_').find(|t| is_arch_tag(t)).map(str::to_string),
            precision_tag: None,
            tiles: None,
            stages: None,
            raw_name: name.to_string(),
            nvjet: None,
        }
    }

    /// Rebuild an nvJet kernel name from the decoded fields.
    pub fn render(&self) -> Option<String> {
        let (tiles, stages, parts) = (self.tiles?, self.stages?, self.nvjet.as_ref()?);
        let mut tokens = vec!["nvjet".to_string()];
        tokens.extend(parts.head.iter().cloned());
        tokens.push(format!("{}x{}", tiles.t_m, tiles.t_n));
        tokens.push(format!("{}x{}", tiles.t_k, stages));
        tokens.push(format!("{}x{}", tiles.c_m, tiles.c_n));
        tokens.extend(parts.tail.iter().cloned());
        Some(tokens.join("_"))
    }
}

fn is_arch_tag(tok: &str) -> bool {
    tok.len() > 2
        && tok.starts_with("sm")
        && tok[2..].chars().next().is_some_and(|c| c.is_ascii_digit())
        && tok[2..].chars().all(|c| c.is_ascii_alphanumeric())
}

/// Canonical positive decimal: no sign, no leading zeros.
fn canonical_uint(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok().filter(|&v| v > 0)
}

fn pair(tok: &str) -> Option<(u64, u64)> {
    let (a, b) = tok.split_once('x')?;
    Some((canonical_uint(a)?, canonical_uint(b)?))
}

/// nvJet names read `nvjet[_<tags>]_<TM>x<TN>_<TK>x<stages>_<CM>x<CN>[_<suffix>]`,
/// e.g. `nvjet_sm90_hsh_256x160_64x4_2x1`. The tile group is the first
/// `AxB` token; the two tokens after it are taken as `T_K x stages` and the
/// cluster shape.
fn parse_nvjet(name: &str) -> Option<KernelDescriptor> {
    let tokens: Vec<&str> = name.split('_').collect();
    if tokens.first() != Some(&"nvjet") {
        return None;
    }
    let tile_at = tokens.iter().position(|t| pair(t).is_some())?;
    let (t_m, t_n) = pair(tokens[tile_at])?;
    let (t_k, stages) = pair(tokens.get(tile_at + 1)?)?;
    let (c_m, c_n) = pair(tokens.get(tile_at + 2)?)?;
    let head: Vec<String> = tokens[1..tile_at].iter().map(|s| s.to_string()).collect();
    let tail: Vec<String> = tokens[tile_at + 3..].iter().map(|s| s.to_string()).collect();
    let arch_tag = head.iter().find(|t| is_arch_tag(t)).cloned();
    let precision_tag = head.iter().find(|t| !is_arch_tag(t) && !t.is_empty()).cloned();
    Some(KernelDescriptor {
        family: KernelFamily::NvJet,
        arch_tag,
        precision_tag,
        tiles: Some(TileConfig { t_m, t_n, t_k, c_m, c_n }),
        stages: Some(stages),
        raw_name: name.to_string(),
        nvjet: Some(NvJetParts { head, tail }),
    })
}

/// Classify a GEMM kernel name. Total on all strings.
pub fn parse_kernel_name(name: &str) -> KernelDescriptor {
    if let Some(d) = parse_nvjet(name) {
        return d;
    }
    let lower = name.to_ascii_lowercase();
    let family = if lower.contains("cutlass3x") || lower.contains("cutlass_3") {
        KernelFamily::Cutlass3
    } else if lower.contains("xmma") {
        KernelFamily::Xmma
    } else if lower.contains("cutlass") {
        KernelFamily::Cutlass2
    } else {
        KernelFamily::Unknown
    };
    KernelDescriptor::other(family, name)
}

/// One point of an overhead curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: u64,
    pub precision: Precision,
    pub overhead_pct: f64,
}

/// Overhead of square GEMMs of each size under each precision's
/// representative tile.
pub fn overhead_sweep(sizes: &[u64], precisions: &[Precision]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = sizes
        .par_iter()
        .filter(|&&n| n > 0)
        .flat_map_iter(|&n| {
            precisions.iter().map(move |&precision| {
                let shape = GemmShape { m: n, k: n, n };
                SweepRow {
                    n,
                    precision,
                    overhead_pct: predict_flops(&shape, &TileConfig::representative(precision)).overhead_pct,
                }
            })
        })
        .collect();
    rows.sort_by(|a, b| a.n.cmp(&b.n).then(a.precision.cmp(&b.precision)));
    rows
}
