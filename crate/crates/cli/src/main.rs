//! `ofu`: compute OFU from counter traces, model tile overhead, simulate
//! counters and compare OFU against application-reported MFU.
//!
//! Exit status: 0 on success, 1 on input or usage errors, 2 when an
//! internal invariant fails.

// `!(x > 0.0)` style checks are intended: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ofu_core::analyze::{
    divergence_report_with, group_by_scale, load_jobs_csv, load_jobs_json, write_scale_csv, BucketPolicy,
    DivergenceReport, JobRecord, DEFAULT_OUTLIER_THRESHOLD_PCT,
};
use ofu_core::archdb::{peak_table, ArchDb, GpuArchitecture, Precision};
use ofu_core::ingest::{
    parse_windows, write_csv, JobWindow, TraceKind, TraceSource, DEFAULT_ACTIVITY_METRIC, DEFAULT_CLOCK_METRIC,
    DEFAULT_GPU_LABEL,
};
use ofu_core::metric::{aggregate_job, ofu_point, AggregateWarning, JobAggregate};
use ofu_core::simulate::{
    sampling_error_study, simulate_counters, write_study_csv, ClockModel, SimConfig, WorkloadPhase, DEFAULT_SEED,
};
use ofu_core::tilemodel::{
    adjust_ofu, overhead, overhead_sweep, parse_kernel_name, predict_flops, predict_flops_default,
    predict_flops_for_kernel, GemmShape, KernelDescriptor, TileConfig,
};

#[derive(Parser)]
#[command(name = "ofu", version, about = "Observed FLOPs Utilization analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-precision peak TFLOP/s for an architecture.
    Peak {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Mean OFU per job window from a counter trace.
    Ofu(OfuArgs),
    /// Rescale OFU to remove tile-padding work.
    Adjust(AdjustArgs),
    /// Tile-quantization overhead of square GEMMs over a size range.
    Sweep(SweepArgs),
    /// Write a synthetic counter trace as CSV.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Output path; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Sampling-interval error study over seeded replicates.
    Study(StudyArgs),
    /// Compare job-level OFU against application-reported MFU.
    Analyze(AnalyzeArgs),
    /// Decode a GEMM kernel name.
    ParseKernel {
        name: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Csv,
    Prom,
}

#[derive(Args)]
struct ArchArgs {
    /// Architecture database (TOML); overrides the built-in entries.
    #[arg(long, env = "OFU_ARCH_DB", value_name = "PATH")]
    arch_db: Option<PathBuf>,
    #[arg(long, default_value = "H100-SXM")]
    arch: String,
}

impl ArchArgs {
    fn load(&self) -> Result<GpuArchitecture> {
        let db = match &self.arch_db {
            Some(path) => {
                let text = read_text(path)?;
                ArchDb::parse(&text).with_context(|| format!("--arch-db {}", path.display()))?
            }
            None => ArchDb::builtin(),
        };
        let arch = db.get(&self.arch).with_context(|| {
            let names: Vec<_> = db.archs().iter().map(|a| a.name.as_str()).collect();
            format!("--arch {}: known architectures are {}", self.arch, names.join(", "))
        })?;
        Ok(arch.clone())
    }

    fn f_max(&self, precision: Precision) -> Result<f64> {
        let arch = self.load()?;
        arch.tensor_clock_mhz(precision)
            .with_context(|| format!("--precision {precision} on {}", arch.name))
    }
}

#[derive(Args)]
struct OfuArgs {
    #[arg(long, value_name = "PATH")]
    trace: PathBuf,
    /// Job windows CSV (`job_id,start,end,gpu_ids`); the whole trace when omitted.
    #[arg(long, value_name = "PATH")]
    window: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, value_parser = parse_precision, default_value = "FP16")]
    precision: Precision,
    /// Trace format; inferred from the extension (`.csv` or Prometheus text).
    #[arg(long, value_enum)]
    input_format: Option<InputFormat>,
    #[arg(long, default_value = DEFAULT_GPU_LABEL)]
    gpu_label: String,
    #[arg(long, default_value = DEFAULT_ACTIVITY_METRIC)]
    activity_metric: String,
    #[arg(long, default_value = DEFAULT_CLOCK_METRIC)]
    clock_metric: String,
    /// Timestamp (s) for Prometheus samples that carry none.
    #[arg(long, value_name = "SECONDS")]
    scrape_time: Option<f64>,
    /// Fail on the first rejected record.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct AdjustArgs {
    /// Observed OFU as a fraction.
    #[arg(long)]
    ofu: f64,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    k: u64,
    #[arg(long)]
    n: u64,
    /// Measured executed FLOPs.
    #[arg(long, conflicts_with_all = ["kernel", "tiles"])]
    executed: Option<u128>,
    /// nvJet kernel name supplying the tile geometry.
    #[arg(long, conflicts_with = "tiles")]
    kernel: Option<String>,
    /// Tile geometry `TMxTNxTK` or `TMxTNxTKxCMxCN`.
    #[arg(long)]
    tiles: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    /// Explicit sizes; overrides --min/--max/--step.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    min: u64,
    #[arg(long, default_value_t = 16384)]
    max: u64,
    #[arg(long, default_value_t = 128)]
    step: u64,
    #[arg(long = "precision", value_parser = parse_precision, value_delimiter = ',',
          default_value = "TF32,BF16,FP16,FP8,NVFP4")]
    precisions: Vec<Precision>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct SimArgs {
    /// Steady tensor-pipe activity; ignored when --phase is given.
    #[arg(long, default_value_t = 0.55)]
    tpa: f64,
    /// Repeating workload phase `DURATION_S:TPA`; may be given several times.
    #[arg(long = "phase", value_parser = parse_phase)]
    phases: Vec<WorkloadPhase>,
    #[arg(long, default_value_t = 3600.0)]
    duration: f64,
    /// Base sampling interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    #[arg(long, default_value_t = 1)]
    gpus: u32,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = ClockModel::H100_GEMM.mean_mhz)]
    clock_mean: f64,
    #[arg(long, default_value_t = ClockModel::H100_GEMM.std_mhz)]
    clock_std: f64,
    #[arg(long, default_value_t = ClockModel::H100_GEMM.min_mhz)]
    clock_min: f64,
    #[arg(long, default_value_t = ClockModel::H100_GEMM.max_mhz)]
    clock_max: f64,
    #[arg(long, default_value_t = ClockModel::H100_GEMM.update_hz)]
    update_hz: f64,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        let phases = if self.phases.is_empty() {
            vec![WorkloadPhase {
                duration_s: self.duration,
                tpa: self.tpa,
            }]
        } else {
            self.phases.clone()
        };
        SimConfig {
            phases,
            total_duration_s: self.duration,
            base_interval_s: self.interval,
            clock: ClockModel {
                mean_mhz: self.clock_mean,
                std_mhz: self.clock_std,
                min_mhz: self.clock_min,
                max_mhz: self.clock_max,
                update_hz: self.update_hz,
            },
            seed: self.seed,
            gpu_count: self.gpus,
        }
    }
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
    intervals: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, value_parser = parse_precision, default_value = "FP16")]
    precision: Precision,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Job records, CSV (`job_id,gpu_count,app_mfu_pct,ofu_pct[,user]`) or a JSON array.
    #[arg(long, value_name = "PATH")]
    jobs: PathBuf,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_THRESHOLD_PCT)]
    outlier_threshold: f64,
    /// Cumulative `<=` thresholds in pp followed by the `>` tail threshold.
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
    buckets: Vec<f64>,
    /// Job ids dropped before computing the report.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Group by GPU count instead of reporting divergence.
    #[arg(long)]
    by_scale: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

/// Failure of an internal invariant rather than of the input.
#[derive(Debug)]
struct Internal(String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "internal invariant failed: {}", self.0)
    }
}

impl std::error::Error for Internal {}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<Precision>().map_err(|e| e.to_string())
}

fn parse_phase(s: &str) -> Result<WorkloadPhase, String> {
    let (d, t) = s.split_once(':').ok_or("expected DURATION_S:TPA")?;
    let duration_s = d.trim().parse::<f64>().map_err(|e| format!("duration: {e}"))?;
    let tpa = t.trim().parse::<f64>().map_err(|e| format!("tpa: {e}"))?;
    Ok(WorkloadPhase { duration_s, tpa })
}

fn parse_tiles(s: &str) -> Result<TileConfig> {
    let dims = s
        .split('x')
        .map(|t| t.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("--tiles {s}: expected TMxTNxTK or TMxTNxTKxCMxCN"))?;
    let cfg = match dims[..] {
        [t_m, t_n, t_k] => TileConfig::new(t_m, t_n, t_k, 1, 1),
        [t_m, t_n, t_k, c_m, c_n] => TileConfig::new(t_m, t_n, t_k, c_m, c_n),
        _ => bail!("--tiles {s}: expected TMxTNxTK or TMxTNxTKxCMxCN"),
    };
    cfg.with_context(|| format!("--tiles {s}"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn to_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Internal(format!("JSON encoding: {e}")).into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        run(cli.command, &mut out).and_then(|()| out.flush().map_err(Into::into))
    }));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
        Err(_) => ExitCode::from(2),
    }
}

fn usage_error(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        _ => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("error: invalid usage");
            let sub = std::env::args()
                .nth(1)
                .filter(|a| !a.starts_with('-'))
                .map(|a| format!(" {a}"))
                .unwrap_or_default();
            eprintln!("{first}");
            eprintln!("remedy: run `ofu{sub} --help` for the accepted flags");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::Peak { arch, format } => peak(&arch, format, out),
        Command::Ofu(args) => ofu(&args, out),
        Command::Adjust(args) => adjust(&args, out),
        Command::Sweep(args) => sweep(&args, out),
        Command::Simulate { sim, out: path } => {
            let samples = simulate_counters(&sim.config())?;
            match path {
                Some(p) => {
                    let file = fs::File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
                    write_csv(&samples, io::BufWriter::new(file))?;
                }
                None => write_csv(&samples, &mut *out)?,
            }
            Ok(())
        }
        Command::Study(args) => study(&args, out),
        Command::Analyze(args) => analyze(&args, out),
        Command::ParseKernel { name, format } => parse_kernel(&name, format, out),
    }
}

fn peak(args: &ArchArgs, format: Format, out: &mut impl Write) -> Result<()> {
    let arch = args.load()?;
    let table = peak_table(&arch)?;
    match format {
        Format::Table => {
            writeln!(out, "{} ({} SMs)", arch.name, arch.sm_count)?;
            writeln!(out, "{:<10} {:>10}  basis", "precision", "TFLOP/s")?;
            for p in &table {
                let basis = serde_json::to_value(p.basis).ok();
                let basis = basis.as_ref().and_then(|v| v.as_str()).unwrap_or("");
                writeln!(out, "{:<10} {:>10.1}  {basis}", p.precision.label(), p.tflops)?;
            }
        }
        Format::Csv => {
            writeln!(out, "architecture,precision,tflops")?;
            for p in &table {
                writeln!(out, "{},{},{}", p.architecture, p.precision.label(), p.tflops)?;
            }
        }
        Format::Json => writeln!(out, "{}", to_json(&table)?)?,
    }
    Ok(())
}

fn ofu(args: &OfuArgs, out: &mut impl Write) -> Result<()> {
    let f_max = args.arch.f_max(args.precision)?;
    let kind = match args.input_format {
        Some(InputFormat::Csv) => TraceKind::Csv,
        Some(InputFormat::Prom) => TraceKind::PrometheusText,
        None if args.trace.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => TraceKind::Csv,
        None => TraceKind::PrometheusText,
    };
    let source = TraceSource {
        kind,
        activity_metric: args.activity_metric.clone(),
        clock_metric: args.clock_metric.clone(),
        gpu_label: args.gpu_label.clone(),
        default_timestamp: args.scrape_time,
        strict: args.strict,
    };
    let file = fs::File::open(&args.trace).with_context(|| format!("cannot read {}", args.trace.display()))?;
    let parsed = source
        .parse(io::BufReader::new(file))
        .with_context(|| format!("--trace {}", args.trace.display()))?;
    for d in &parsed.diagnostics {
        eprintln!("warning: {}: {d}", args.trace.display());
    }
    if parsed.samples.is_empty() {
        bail!("--trace {}: no usable samples", args.trace.display());
    }

    let points: Vec<_> = parsed.samples.iter().map(|s| ofu_point(s, f_max)).collect();
    let windows = match &args.window {
        Some(path) => {
            let file = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
            parse_windows(io::BufReader::new(file)).with_context(|| format!("--window {}", path.display()))?
        }
        None => {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.timestamp), hi.max(p.timestamp))
                });
            vec![JobWindow::new("trace", lo, hi.next_up(), BTreeSet::new())?]
        }
    };

    let mut aggregates = Vec::with_capacity(windows.len());
    for w in &windows {
        let gpus: HashSet<String> = w.gpu_ids.iter().cloned().collect();
        let agg = aggregate_job(&w.job_id, &points, (w.start, w.end), &gpus)
            .with_context(|| format!("job {}", w.job_id))?;
        aggregates.push(agg);
    }
    write_aggregates(&aggregates, args.format, out)
}

fn warning_text(w: &AggregateWarning) -> String {
    match w {
        AggregateWarning::ClockAboveMax { points } => format!("clock above f_max at {points} points"),
        AggregateWarning::CoarseInterval { interval_s } => format!("coarse collection interval {interval_s} s"),
    }
}

fn write_aggregates(aggs: &[JobAggregate], format: Format, out: &mut impl Write) -> Result<()> {
    match format {
        Format::Table => {
            writeln!(out, "{:<16} {:>5} {:>9} {:>9} {:>11}  warnings", "job_id", "gpus", "samples", "OFU", "interval_s")?;
            for a in aggs {
                let interval = a.collection_interval.map_or("-".to_string(), |i| format!("{i}"));
                let warnings: Vec<_> = a.warnings.iter().map(warning_text).collect();
                writeln!(
                    out,
                    "{:<16} {:>5} {:>9} {:>8.2}% {:>11}  {}",
                    a.job_id,
                    a.gpu_count,
                    a.sample_count,
                    a.mean_ofu * 100.0,
                    interval,
                    if warnings.is_empty() { "-".into() } else { warnings.join("; ") }
                )?;
            }
        }
        Format::Csv => {
            writeln!(out, "job_id,gpu_count,sample_count,mean_ofu,collection_interval_s,start,end")?;
            for a in aggs {
                let interval = a.collection_interval.map_or(String::new(), |i| i.to_string());
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    a.job_id, a.gpu_count, a.sample_count, a.mean_ofu, interval, a.window.0, a.window.1
                )?;
            }
        }
        Format::Json => writeln!(out, "{}", to_json(aggs)?)?,
    }
    Ok(())
}

fn adjust(args: &AdjustArgs, out: &mut impl Write) -> Result<()> {
    let shape = GemmShape::new(args.m, args.k, args.n).context("--m/--k/--n")?;
    if !(args.ofu >= 0.0 && args.ofu.is_finite()) {
        bail!("--ofu {}: expected a non-negative fraction", args.ofu);
    }
    let (executed, source, tiles) = if let Some(executed) = args.executed {
        (executed, "measured".to_string(), None)
    } else {
        let est = if let Some(name) = &args.kernel {
            predict_flops_for_kernel(&shape, &parse_kernel_name(name)).with_context(|| format!("--kernel {name}"))?
        } else if let Some(t) = &args.tiles {
            predict_flops(&shape, &parse_tiles(t)?)
        } else {
            eprintln!("warning: no tile geometry given; assuming {}", TileConfig::DEFAULT);
            predict_flops_default(&shape)
        };
        let source = serde_json::to_value(est.source)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        (est.model_flops, source, Some(est.config))
    };
    let overhead_pct = overhead(&shape, executed).context("--executed")?;
    let adjusted = adjust_ofu(args.ofu, &shape, executed)?;

    match args.format {
        Format::Table => {
            writeln!(out, "shape          {}x{}x{} (MxKxN)", shape.m, shape.k, shape.n)?;
            if let Some(t) = tiles {
                writeln!(out, "tiles          {t}")?;
            }
            writeln!(out, "theoretical    {}", shape.theoretical_flops())?;
            writeln!(out, "executed       {executed} ({source})")?;
            writeln!(out, "overhead       {overhead_pct:.4}%")?;
            writeln!(out, "ofu            {:.4}%", args.ofu * 100.0)?;
            writeln!(out, "adjusted ofu   {:.4}%", adjusted * 100.0)?;
        }
        Format::Csv => {
            writeln!(out, "m,k,n,theoretical_flops,executed_flops,source,overhead_pct,ofu,adjusted_ofu")?;
            writeln!(
                out,
                "{},{},{},{},{executed},{source},{overhead_pct},{},{adjusted}",
                shape.m,
                shape.k,
                shape.n,
                shape.theoretical_flops(),
                args.ofu
            )?;
        }
        Format::Json => {
            let v = serde_json::json!({
                "shape": shape,
                "tiles": tiles,
                "theoretical_flops": shape.theoretical_flops(),
                "executed_flops": executed,
                "source": source,
                "overhead_pct": overhead_pct,
                "ofu": args.ofu,
                "adjusted_ofu": adjusted,
            });
            writeln!(out, "{}", to_json(&v)?)?;
        }
    }
    Ok(())
}

fn sweep(args: &SweepArgs, out: &mut impl Write) -> Result<()> {
    let sizes: Vec<u64> = if args.sizes.is_empty() {
        if args.step == 0 || args.min == 0 || args.min > args.max {
            bail!("--min/--max/--step: need 0 < min <= max and step > 0");
        }
        (args.min..=args.max).step_by(args.step as usize).collect()
    } else {
        args.sizes.clone()
    };
    if sizes.contains(&0) {
        bail!("--sizes: sizes must be positive");
    }
    let rows = overhead_sweep(&sizes, &args.precisions);
    match args.format {
        Format::Table => {
            writeln!(out, "{:>8} {:<9} {:>12}", "n", "precision", "overhead_%")?;
            for r in &rows {
                writeln!(out, "{:>8} {:<9} {:>12.4}", r.n, r.precision.label(), r.overhead_pct)?;
            }
        }
        Format::Csv => {
            writeln!(out, "n,precision,overhead_pct")?;
            for r in &rows {
                writeln!(out, "{},{},{}", r.n, r.precision.label(), r.overhead_pct)?;
            }
        }
        Format::Json => writeln!(out, "{}", to_json(&rows)?)?,
    }
    Ok(())
}

fn study(args: &StudyArgs, out: &mut impl Write) -> Result<()> {
    let f_max = args.arch.f_max(args.precision)?;
    let results = sampling_error_study(&args.sim.config(), &args.intervals, f_max, args.replicates)?;
    match args.format {
        Format::Table => {
            writeln!(out, "{:>10} {:>10} {:>10} {:>10}", "interval_s", "sigma_pp", "ci95_pp", "estimates")?;
            for r in &results {
                writeln!(
                    out,
                    "{:>10} {:>10.4} {:>10.4} {:>10}",
                    r.interval_s, r.sigma_pp, r.ci95_pp, r.estimates
                )?;
            }
        }
        Format::Csv => write_study_csv(&results, &mut *out)?,
        Format::Json => writeln!(out, "{}", to_json(&results)?)?,
    }
    Ok(())
}

fn load_jobs(path: &Path) -> Result<Vec<JobRecord>> {
    let file = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let reader = io::BufReader::new(file);
    let jobs = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        load_jobs_json(reader)
    } else {
        load_jobs_csv(reader)
    };
    jobs.with_context(|| format!("--jobs {}", path.display()))
}

fn analyze(args: &AnalyzeArgs, out: &mut impl Write) -> Result<()> {
    let excluded: HashSet<&str> = args.exclude.iter().map(String::as_str).collect();
    let jobs: Vec<JobRecord> = load_jobs(&args.jobs)?
        .into_iter()
        .filter(|j| !excluded.contains(j.job_id.as_str()))
        .collect();

    if args.by_scale {
        let groups = group_by_scale(&jobs);
        match args.format {
            Format::Table => {
                writeln!(
                    out,
                    "{:>6} {:>6} {:>10} {:>10} {:>12} {:>12}",
                    "gpus", "jobs", "mean_mfu", "std_mfu", "mean_abs_err", "std_abs_err"
                )?;
                for g in &groups {
                    writeln!(
                        out,
                        "{:>6} {:>6} {:>10.2} {:>10.2} {:>12.2} {:>12.2}",
                        g.gpu_count, g.jobs, g.mean_mfu_pct, g.std_mfu_pct, g.mean_abs_err_pp, g.std_abs_err_pp
                    )?;
                }
            }
            Format::Csv => write_scale_csv(&groups, &mut *out)?,
            Format::Json => writeln!(out, "{}", to_json(&groups)?)?,
        }
        return Ok(());
    }

    let policy = match args.buckets.split_last() {
        Some((&gt, le)) if !le.is_empty() && le.windows(2).all(|w| w[0] < w[1]) => BucketPolicy { le: le.to_vec(), gt },
        _ => bail!("--buckets: need ascending `<=` thresholds followed by the `>` threshold, e.g. 2,5,10,20"),
    };
    if !(args.outlier_threshold >= 0.0) {
        bail!("--outlier-threshold {}: must be non-negative", args.outlier_threshold);
    }
    let report = divergence_report_with(&jobs, args.outlier_threshold, &policy);
    write_report(&report, args.format, out)
}

fn write_report(r: &DivergenceReport, format: Format, out: &mut impl Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    match format {
        Format::Table => {
            writeln!(out, "jobs              {}", r.job_count)?;
            match (r.pearson_r, &r.pearson_note) {
                (Some(v), _) => writeln!(out, "pearson r         {v:.4}")?,
                (None, note) => writeln!(out, "pearson r         n/a ({})", note.as_deref().unwrap_or("undefined"))?,
            }
            if let Some(mae) = r.mae_pp {
                writeln!(out, "MAE               {mae:.2} pp")?;
            }
            for b in &r.buckets_le {
                writeln!(out, "|err| <= {:<6}   {:.1}%", format!("{}pp", b.threshold_pp), b.fraction * 100.0)?;
            }
            writeln!(
                out,
                "|err| >  {:<6}   {:.1}%",
                format!("{}pp", r.bucket_gt.threshold_pp),
                r.bucket_gt.fraction * 100.0
            )?;
            writeln!(out, "outliers (> {}% relative error): {}", r.outlier_threshold_pct, r.outliers.len())?;
            for o in &r.outliers {
                writeln!(out, "  {:<20} {:.1}%", o.job_id, o.relative_error_pct)?;
            }
            if !r.zero_ofu_jobs.is_empty() {
                writeln!(out, "zero-OFU jobs skipped: {}", r.zero_ofu_jobs.join(", "))?;
            }
        }
        Format::Csv => {
            writeln!(out, "metric,threshold_pp,value")?;
            writeln!(out, "job_count,,{}", r.job_count)?;
            writeln!(out, "pearson_r,,{}", opt(r.pearson_r))?;
            writeln!(out, "mae_pp,,{}", opt(r.mae_pp))?;
            for b in &r.buckets_le {
                writeln!(out, "bucket_le,{},{}", b.threshold_pp, b.fraction)?;
            }
            writeln!(out, "bucket_gt,{},{}", r.bucket_gt.threshold_pp, r.bucket_gt.fraction)?;
            writeln!(out, "outlier_count,{},{}", r.outlier_threshold_pct, r.outliers.len())?;
        }
        Format::Json => writeln!(out, "{}", to_json(r)?)?,
    }
    Ok(())
}

fn parse_kernel(name: &str, format: Format, out: &mut impl Write) -> Result<()> {
    let d: KernelDescriptor = parse_kernel_name(name);
    match format {
        Format::Table => {
            let dash = || "-".to_string();
            writeln!(out, "name       {}", d.raw_name)?;
            writeln!(out, "family     {:?}", d.family)?;
            writeln!(out, "arch       {}", d.arch_tag.clone().unwrap_or_else(dash))?;
            writeln!(out, "precision  {}", d.precision_tag.clone().unwrap_or_else(dash))?;
            match d.tiles {
                Some(t) => {
                    writeln!(out, "tile       {}x{}x{} (T_M x T_N x T_K)", t.t_m, t.t_n, t.t_k)?;
                    writeln!(out, "cluster    {}x{}", t.c_m, t.c_n)?;
                }
                None => writeln!(out, "tile       - (geometry not encoded in this name)")?,
            }
            writeln!(out, "stages     {}", d.stages.map_or_else(dash, |s| s.to_string()))?;
        }
        Format::Csv => {
            let t = d.tiles;
            let f = |v: Option<u64>| v.map_or(String::new(), |x| x.to_string());
            writeln!(out, "name,family,arch,precision,t_m,t_n,t_k,c_m,c_n,stages")?;
            writeln!(
                out,
                "{},{:?},{},{},{},{},{},{},{},{}",
                d.raw_name,
                d.family,
                d.arch_tag.clone().unwrap_or_default(),
                d.precision_tag.clone().unwrap_or_default(),
                f(t.map(|t| t.t_m)),
                f(t.map(|t| t.t_n)),
                f(t.map(|t| t.t_k)),
                f(t.map(|t| t.c_m)),
                f(t.map(|t| t.c_n)),
                f(d.stages)
            )?;
        }
        Format::Json => writeln!(out, "{}", to_json(&d)?)?,
    }
    Ok(())
}
