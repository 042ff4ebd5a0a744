//! Overall FLOP Utilization (OFU) analytics.
//!
//! OFU estimates GPU FLOP utilization from two hardware counters: tensor
//! pipe activity and SM clock. This crate derives theoretical peaks from
//! architecture parameters, aggregates counter telemetry into job-level OFU,
//! models GEMM tile-quantization overhead, and audits application-reported
//! MFU against OFU.
//!
//! CUDA-core (non-tensor) FLOPs are not counted. In transformer training
//! they are a fraction of a percent of total work, and MFU conventions
//! exclude them as well.

// `!(x > 0.0)` style checks are intended: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod archdb;
pub mod ingest;
pub mod metric;
pub mod simulate;
pub mod tilemodel;

pub use archdb::{ArchDb, GpuArchitecture, PeakThroughput, Precision};
pub use metric::{CounterSample, JobAggregate, OfuPoint};
