//! Counter telemetry ingestion: CSV traces, a Prometheus text-exposition
//! subset as written by the DCGM exporter, and job windows.
//!
//! Parsers never abort on bad records. Each record is retained, rejected
//! (malformed or out of range) or dropped (irrelevant or unpairable), and
//! every non-retained record leaves a [`Diagnostic`]. In strict mode the
//! first diagnostic that rejects a record becomes a fatal error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::metric::CounterSample;

pub const CSV_HEADER: [&str; 4] = ["timestamp", "gpu_id", "tensor_active", "sm_clock_mhz"];
pub const DEFAULT_ACTIVITY_METRIC: &str = "DCGM_FI_PROF_PIPE_TENSOR_ACTIVE";
pub const DEFAULT_CLOCK_METRIC: &str = "DCGM_FI_DEV_SM_CLOCK";
pub const DEFAULT_GPU_LABEL: &str = "gpu";
/// Activity and clock samples closer than this pair up.
pub const PAIRING_TOLERANCE_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing CSV header; expected `{}`", CSV_HEADER.join(","))]
    MissingHeader,
    #[error("strict mode: {0}")]
    Strict(Diagnostic),
    #[error("invalid job window {job_id}: {reason}")]
    InvalidWindow { job_id: String, reason: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// Record rejected: unparsable or outside the valid range.
    MalformedRow { reason: String },
    /// Prometheus line that does not follow the exposition grammar.
    ParseError { reason: String },
    /// Activity or clock sample with no counterpart within the pairing
    /// tolerance; dropped.
    UnpairedSample { metric: String, gpu: String, timestamp: f64 },
    /// Sample missing the GPU label or a timestamp; dropped.
    Unattributed { reason: String },
    /// Timestamp earlier than the previous sample of the same GPU; kept.
    OutOfOrder { gpu: String, timestamp: f64 },
    /// Percent-scaled activity divided by 100; kept.
    Rescaled { from: f64 },
}

impl DiagnosticKind {
    fn is_rejection(&self) -> bool {
        matches!(self, DiagnosticKind::MalformedRow { .. } | DiagnosticKind::ParseError { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub byte_offset: usize,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} (byte {}): ", self.line, self.byte_offset)?;
        match &self.kind {
            DiagnosticKind::MalformedRow { reason } => write!(f, "malformed row: {reason}"),
            DiagnosticKind::ParseError { reason } => write!(f, "parse error: {reason}"),
            DiagnosticKind::UnpairedSample { metric, gpu, timestamp } => {
                write!(f, "unpaired {metric} sample for gpu {gpu} at t={timestamp}")
            }
            DiagnosticKind::Unattributed { reason } => write!(f, "dropped: {reason}"),
            DiagnosticKind::OutOfOrder { gpu, timestamp } => {
                write!(f, "out-of-order timestamp {timestamp} for gpu {gpu}")
            }
            DiagnosticKind::Rescaled { from } => write!(f, "activity {from} treated as percent"),
        }
    }
}

/// Record accounting: `retained + rejected + dropped == total_records`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RecordCounts {
    pub total_records: usize,
    pub retained: usize,
    pub rejected: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ParsedTrace {
    pub samples: Vec<CounterSample>,
    pub diagnostics: Vec<Diagnostic>,
    pub counts: RecordCounts,
}

impl ParsedTrace {
    pub fn rejections(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.kind.is_rejection())
    }

    fn into_strict(self, strict: bool) -> Result<Self, IngestError> {
        if strict {
            if let Some(d) = self.rejections().next() {
                return Err(IngestError::Strict(d.clone()));
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Csv,
    PrometheusText,
}

/// Metric identities and options for a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSource {
    pub kind: TraceKind,
    pub activity_metric: String,
    pub clock_metric: String,
    pub gpu_label: String,
    /// Assigned to Prometheus samples that carry no timestamp; without it
    /// such samples are dropped.
    pub default_timestamp: Option<f64>,
    pub strict: bool,
}

impl TraceSource {
    pub fn csv() -> Self {
        TraceSource {
            kind: TraceKind::Csv,
            ..Self::prometheus()
        }
    }

    pub fn prometheus() -> Self {
        TraceSource {
            kind: TraceKind::PrometheusText,
            activity_metric: DEFAULT_ACTIVITY_METRIC.into(),
            clock_metric: DEFAULT_CLOCK_METRIC.into(),
            gpu_label: DEFAULT_GPU_LABEL.into(),
            default_timestamp: None,
            strict: false,
        }
    }

    pub fn parse<R: Read>(&self, mut input: R) -> Result<ParsedTrace, IngestError> {
        match self.kind {
            TraceKind::Csv => parse_csv(input, self.strict),
            TraceKind::PrometheusText => {
                let mut buf = Vec::new();
                input.read_to_end(&mut buf)?;
                parse_prometheus_text(&buf, self)
            }
        }
    }
}

/// Parse a `timestamp,gpu_id,tensor_active,sm_clock_mhz` trace.
pub fn parse_csv<R: Read>(input: R, strict: bool) -> Result<ParsedTrace, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = rdr.byte_records();

    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) if e.is_io_error() => return Err(e.into()),
        _ => return Err(IngestError::MissingHeader),
    };
    let header_ok = header.len() == CSV_HEADER.len()
        && header
            .iter()
            .zip(CSV_HEADER)
            .all(|(got, want)| trim_bom(got).eq_ignore_ascii_case(want.as_bytes()));
    if !header_ok {
        return Err(IngestError::MissingHeader);
    }

    let mut out = ParsedTrace::default();
    let mut last_ts: HashMap<String, f64> = HashMap::new();
    for rec in records {
        out.counts.total_records += 1;
        let (line, byte_offset, parsed) = match rec {
            Ok(r) => {
                let (line, byte) = r.position().map_or((0, 0), |p| (p.line(), p.byte()));
                (line as usize, byte as usize, csv_row(&r))
            }
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                let (line, byte) = e.position().map_or((0, 0), |p| (p.line(), p.byte()));
                (line as usize, byte as usize, Err(e.to_string()))
            }
        };
        match parsed {
            Ok(sample) => {
                if let Some(&prev) = last_ts.get(&sample.gpu_id) {
                    if sample.timestamp < prev {
                        out.diagnostics.push(Diagnostic {
                            line,
                            byte_offset,
                            kind: DiagnosticKind::OutOfOrder {
                                gpu: sample.gpu_id.clone(),
                                timestamp: sample.timestamp,
                            },
                        });
                    }
                }
                last_ts.insert(sample.gpu_id.clone(), sample.timestamp);
                out.counts.retained += 1;
                out.samples.push(sample);
            }
            Err(reason) => {
                out.counts.rejected += 1;
                out.diagnostics.push(Diagnostic {
                    line,
                    byte_offset,
                    kind: DiagnosticKind::MalformedRow { reason },
                });
            }
        }
    }
    out.into_strict(strict)
}

fn trim_bom(b: &[u8]) -> &[u8] {
    b.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(b)
}

fn csv_row(r: &csv::ByteRecord) -> Result<CounterSample, String> {
    if r.len() != 4 {
        return Err(format!("expected 4 fields, found {}", r.len()));
    }
    let text = |i: usize| std::str::from_utf8(&r[i]).map_err(|_| format!("field {} is not UTF-8", i + 1));
    let num = |i: usize| -> Result<f64, String> {
        let s = text(i)?;
        s.parse::<f64>().map_err(|_| format!("{}: cannot parse {s:?}", CSV_HEADER[i]))
    };
    let gpu = text(1)?;
    if gpu.is_empty() {
        return Err("empty gpu_id".into());
    }
    CounterSample::new(num(0)?, gpu, num(2)?, num(3)?).map_err(|e| e.to_string())
}

/// Write samples in the format [`parse_csv`] reads. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(samples: &[CounterSample], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in samples {
        w.write_record([
            s.timestamp.to_string(),
            s.gpu_id.clone(),
            s.tensor_active.to_string(),
            s.sm_clock_mhz.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed exposition line.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpositionLine {
    pub name: String,
    pub labels: Vec<(String, String)>,
    pub value: f64,
    pub timestamp_ms: Option<i64>,
}

/// Parse `NAME[{label="v",...}] VALUE [TIMESTAMP_MS]`. The error carries the
/// offset within `line` where parsing failed.
pub fn parse_exposition_line(line: &str) -> Result<ExpositionLine, (usize, String)> {
    let b = line.as_bytes();
    let mut i = 0;
    let is_name_start = |c: u8| c.is_ascii_alphabetic() || c == b'_' || c == b':';
    let is_name = |c: u8| c.is_ascii_alphanumeric() || c == b'_' || c == b':';
    if !b.first().is_some_and(|&c| is_name_start(c)) {
        return Err((0, "expected metric name".into()));
    }
    while i < b.len() && is_name(b[i]) {
        i += 1;
    }
    let name = line[..i].to_string();
    let skip_ws = |i: &mut usize| {
        while *i < b.len() && (b[*i] == b' ' || b[*i] == b'\t') {
            *i += 1;
        }
    };

    let mut labels = Vec::new();
    skip_ws(&mut i);
    if i < b.len() && b[i] == b'{' {
        i += 1;
        loop {
            skip_ws(&mut i);
            if i < b.len() && b[i] == b'}' {
                i += 1;
                break;
            }
            let ks = i;
            if !(i < b.len() && (b[i].is_ascii_alphabetic() || b[i] == b'_')) {
                return Err((i, "expected label name".into()));
            }
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            let key = line[ks..i].to_string();
            skip_ws(&mut i);
            if !(i < b.len() && b[i] == b'=') {
                return Err((i, "expected '='".into()));
            }
            i += 1;
            skip_ws(&mut i);
            if !(i < b.len() && b[i] == b'"') {
                return Err((i, "expected '\"'".into()));
            }
            i += 1;
            let mut val = String::new();
            let mut closed = false;
            let mut chars = line[i..].char_indices();
            while let Some((off, c)) = chars.next() {
                match c {
                    '"' => {
                        i += off + 1;
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, 'n')) => val.push('\n'),
                        Some((_, '\\')) => val.push('\\'),
                        Some((_, '"')) => val.push('"'),
                        Some((o, other)) => return Err((i + o, format!("invalid escape '\\{other}'"))),
                        None => break,
                    },
                    c => val.push(c),
                }
            }
            if !closed {
                return Err((line.len(), "unterminated label value".into()));
            }
            labels.push((key, val));
            skip_ws(&mut i);
            if i < b.len() && b[i] == b',' {
                i += 1;
            } else if !(i < b.len() && b[i] == b'}') {
                return Err((i, "expected ',' or '}'".into()));
            }
        }
    }

    skip_ws(&mut i);
    let vs = i;
    while i < b.len() && b[i] != b' ' && b[i] != b'\t' {
        i += 1;
    }
    if vs == i {
        return Err((vs, "expected sample value".into()));
    }
    let value = parse_prom_float(&line[vs..i]).ok_or((vs, format!("invalid value {:?}", &line[vs..i])))?;
    skip_ws(&mut i);
    let mut timestamp_ms = None;
    if i < b.len() {
        let ts = i;
        while i < b.len() && b[i] != b' ' && b[i] != b'\t' {
            i += 1;
        }
        timestamp_ms = Some(
            line[ts..i]
                .parse::<i64>()
                .map_err(|_| (ts, format!("invalid timestamp {:?}", &line[ts..i])))?,
        );
        skip_ws(&mut i);
        if i < b.len() {
            return Err((i, "trailing characters".into()));
        }
    }
    Ok(ExpositionLine {
        name,
        labels,
        value,
        timestamp_ms,
    })
}

fn parse_prom_float(s: &str) -> Option<f64> {
    match s {
        "+Inf" | "Inf" => Some(f64::INFINITY),
        "-Inf" => Some(f64::NEG_INFINITY),
        "NaN" => Some(f64::NAN),
        _ => s.parse().ok(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Activity,
    Clock,
}

#[derive(Debug)]
struct Reading {
    t: f64,
    value: f64,
    line: usize,
    offset: usize,
    used: bool,
}

/// Parse DCGM exporter output and pair activity with clock readings per GPU.
///
/// Timestamps are converted from milliseconds to seconds. Activity values in
/// `(1, 100]` are taken as percent and divided by 100.
pub fn parse_prometheus_text(input: &[u8], source: &TraceSource) -> Result<ParsedTrace, IngestError> {
    let mut out = ParsedTrace::default();
    let mut readings: BTreeMap<(String, u8), Vec<Reading>> = BTreeMap::new();
    let mut offset = 0usize;

    for (idx, raw) in input.split(|&c| c == b'\n').enumerate() {
        let line_no = idx + 1;
        let line_offset = offset;
        offset += raw.len() + 1;
        let Ok(text) = std::str::from_utf8(raw) else {
            out.counts.total_records += 1;
            out.counts.rejected += 1;
            out.diagnostics.push(Diagnostic {
                line: line_no,
                byte_offset: line_offset,
                kind: DiagnosticKind::ParseError {
                    reason: "line is not valid UTF-8".into(),
                },
            });
            continue;
        };
        let lead = text.len() - text.trim_start().len();
        let text = text.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        out.counts.total_records += 1;
        let diag = |kind| Diagnostic {
            line: line_no,
            byte_offset: line_offset + lead,
            kind,
        };
        let parsed = match parse_exposition_line(text) {
            Ok(p) => p,
            Err((at, reason)) => {
                out.counts.rejected += 1;
                let mut d = diag(DiagnosticKind::ParseError { reason });
                d.byte_offset += at;
                out.diagnostics.push(d);
                continue;
            }
        };
        let role = if parsed.name == source.activity_metric {
            Role::Activity
        } else if parsed.name == source.clock_metric {
            Role::Clock
        } else {
            out.counts.dropped += 1;
            continue;
        };
        let Some(gpu) = parsed.labels.iter().find(|(k, _)| *k == source.gpu_label).map(|(_, v)| v.clone()) else {
            out.counts.dropped += 1;
            out.diagnostics.push(diag(DiagnosticKind::Unattributed {
                reason: format!("no `{}` label", source.gpu_label),
            }));
            continue;
        };
        let t = match (parsed.timestamp_ms, source.default_timestamp) {
            (Some(ms), _) => ms as f64 / 1000.0,
            (None, Some(t)) => t,
            (None, None) => {
                out.counts.dropped += 1;
                out.diagnostics.push(diag(DiagnosticKind::Unattributed {
                    reason: "sample has no timestamp".into(),
                }));
                continue;
            }
        };
        let mut value = parsed.value;
        match role {
            Role::Activity => {
                if value > 1.0 && value <= 100.0 {
                    out.diagnostics.push(diag(DiagnosticKind::Rescaled { from: value }));
                    value /= 100.0;
                }
                if !(0.0..=1.0).contains(&value) {
                    out.counts.rejected += 1;
                    out.diagnostics.push(diag(DiagnosticKind::MalformedRow {
                        reason: format!("activity {} outside [0, 1]", parsed.value),
                    }));
                    continue;
                }
            }
            Role::Clock => {
                if !(value > 0.0 && value.is_finite()) {
                    out.counts.rejected += 1;
                    out.diagnostics.push(diag(DiagnosticKind::MalformedRow {
                        reason: format!("clock {value} must be positive"),
                    }));
                    continue;
                }
            }
        }
        readings.entry((gpu, role as u8)).or_default().push(Reading {
            t,
            value,
            line: line_no,
            offset: line_offset + lead,
            used: false,
        });
    }

    let gpus: BTreeSet<String> = readings.keys().map(|(g, _)| g.clone()).collect();
    for gpu in gpus {
        let mut act = readings.remove(&(gpu.clone(), Role::Activity as u8)).unwrap_or_default();
        let mut clk = readings.remove(&(gpu.clone(), Role::Clock as u8)).unwrap_or_default();
        act.sort_by(|a, b| a.t.total_cmp(&b.t));
        clk.sort_by(|a, b| a.t.total_cmp(&b.t));
        for a in act.iter_mut() {
            let best = clk
                .iter_mut()
                .filter(|c| !c.used && (c.t - a.t).abs() <= PAIRING_TOLERANCE_S)
                .min_by(|x, y| (x.t - a.t).abs().total_cmp(&(y.t - a.t).abs()));
            if let Some(c) = best {
                c.used = true;
                a.used = true;
                out.counts.retained += 2;
                out.samples.push(CounterSample {
                    timestamp: a.t,
                    gpu_id: gpu.clone(),
                    tensor_active: a.value,
                    sm_clock_mhz: c.value,
                });
            }
        }
        for (r, metric) in act
            .iter()
            .map(|r| (r, &source.activity_metric))
            .chain(clk.iter().map(|r| (r, &source.clock_metric)))
            .filter(|(r, _)| !r.used)
        {
            out.counts.dropped += 1;
            out.diagnostics.push(Diagnostic {
                line: r.line,
                byte_offset: r.offset,
                kind: DiagnosticKind::UnpairedSample {
                    metric: metric.clone(),
                    gpu: gpu.clone(),
                    timestamp: r.t,
                },
            });
        }
    }
    out.samples
        .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.gpu_id.cmp(&b.gpu_id)));
    out.diagnostics.sort_by_key(|d| d.line);
    out.into_strict(source.strict)
}

/// A job's training window. `gpu_ids` empty means every GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobWindow {
    pub job_id: String,
    pub start: f64,
    pub end: f64,
    pub gpu_ids: BTreeSet<String>,
}

impl JobWindow {
    pub fn new(
        job_id: impl Into<String>,
        start: f64,
        end: f64,
        gpu_ids: impl IntoIterator<Item = String>,
    ) -> Result<Self, IngestError> {
        let job_id = job_id.into();
        if !(end > start) {
            return Err(IngestError::InvalidWindow {
                job_id,
                reason: format!("end {end} must be after start {start}"),
            });
        }
        Ok(JobWindow {
            job_id,
            start,
            end,
            gpu_ids: gpu_ids.into_iter().collect(),
        })
    }

    /// Half-open `[start, end)` plus GPU membership.
    pub fn contains(&self, s: &CounterSample) -> bool {
        s.timestamp >= self.start
            && s.timestamp < self.end
            && (self.gpu_ids.is_empty() || self.gpu_ids.contains(&s.gpu_id))
    }
}

pub fn align_to_window<'a, I>(samples: I, window: &'a JobWindow) -> impl Iterator<Item = CounterSample> + 'a
where
    I: IntoIterator<Item = CounterSample>,
    I::IntoIter: 'a,
{
    samples.into_iter().filter(move |s| window.contains(s))
}

/// Read job windows from CSV with header `job_id,start,end,gpu_ids`, where
/// `gpu_ids` is a `;`-separated list (empty for all GPUs).
pub fn parse_windows<R: Read>(input: R) -> Result<Vec<JobWindow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let job_id = field(0).to_string();
        let num = |i: usize| {
            field(i).parse::<f64>().map_err(|_| IngestError::InvalidWindow {
                job_id: job_id.clone(),
                reason: format!("cannot parse {:?} as seconds", field(i)),
            })
        };
        let gpus = field(3)
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(JobWindow::new(job_id.clone(), num(1)?, num(2)?, gpus)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(body: &str) -> ParsedTrace {
        parse_csv(body.as_bytes(), false).unwrap()
    }

    #[test]
    fn csv_single_row() {
        let t = csv("timestamp,gpu_id,tensor_active,sm_clock_mhz\n10.0,gpu0,0.55,1352\n");
        assert_eq!(t.samples, vec![CounterSample::new(10.0, "gpu0", 0.55, 1352.0).unwrap()]);
        assert!(t.diagnostics.is_empty());
    }

    #[test]
    fn csv_out_of_range_activity() {
        let t = csv("timestamp,gpu_id,tensor_active,sm_clock_mhz\n10.0,gpu0,1.2,1352\n11.0,gpu0,0.5,0\n");
        assert!(t.samples.is_empty());
        assert_eq!(t.counts.rejected, 2);
        assert_eq!(t.diagnostics[0].line, 2);
        assert_eq!(t.diagnostics[1].line, 3);
        assert!(matches!(t.diagnostics[0].kind, DiagnosticKind::MalformedRow { .. }));
    }

    #[test]
    fn csv_strict_fails_on_first_bad_row() {
        let err = parse_csv("timestamp,gpu_id,tensor_active,sm_clock_mhz\n1,g,x,1\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, IngestError::Strict(_)));
    }

    #[test]
    fn csv_header_only_and_missing_header() {
        let t = csv("timestamp,gpu_id,tensor_active,sm_clock_mhz\n");
        assert!(t.samples.is_empty());
        assert_eq!(t.counts.total_records, 0);
        assert!(matches!(parse_csv("".as_bytes(), false), Err(IngestError::MissingHeader)));
        assert!(matches!(parse_csv("1,g,0.5,1\n".as_bytes(), false), Err(IngestError::MissingHeader)));
    }

    #[test]
    fn csv_out_of_order_flagged_but_kept() {
        let t = csv("timestamp,gpu_id,tensor_active,sm_clock_mhz\n2,g,0.5,1\n1,g,0.5,1\n1,h,0.5,1\n");
        assert_eq!(t.samples.len(), 3);
        assert_eq!(t.diagnostics.len(), 1);
        assert!(matches!(t.diagnostics[0].kind, DiagnosticKind::OutOfOrder { .. }));
    }

    #[test]
    fn csv_write_then_parse() {
        let samples = vec![
            CounterSample::new(0.1, "gpu,0", 0.1 + 0.2, 1352.123456789).unwrap(),
            CounterSample::new(1.0 / 3.0, "g1", 1.0, 1830.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_csv(&samples, &mut buf).unwrap();
        assert_eq!(parse_csv(buf.as_slice(), true).unwrap().samples, samples);
    }

    const PAIRED: &str = "# HELP DCGM_FI_DEV_SM_CLOCK SM clock frequency (in MHz).\n\
# TYPE DCGM_FI_DEV_SM_CLOCK gauge\n\
DCGM_FI_PROF_PIPE_TENSOR_ACTIVE{gpu=\"0\",UUID=\"GPU-abc\"} 0.55 1700000010000\n\
DCGM_FI_DEV_SM_CLOCK{gpu=\"0\",UUID=\"GPU-abc\"} 1352 1700000010000\n";

    #[test]
    fn prometheus_pairs_samples() {
        let t = parse_prometheus_text(PAIRED.as_bytes(), &TraceSource::prometheus()).unwrap();
        assert_eq!(
            t.samples,
            vec![CounterSample::new(1700000010.0, "0", 0.55, 1352.0).unwrap()]
        );
        assert!(t.diagnostics.is_empty());
        assert_eq!(
            t.counts,
            RecordCounts {
                total_records: 2,
                retained: 2,
                rejected: 0,
                dropped: 0
            }
        );
    }

    #[test]
    fn prometheus_unpaired_activity() {
        let text = "DCGM_FI_PROF_PIPE_TENSOR_ACTIVE{gpu=\"0\"} 0.55 1700000010000\n\
DCGM_FI_DEV_SM_CLOCK{gpu=\"0\"} 1352 1700000020000\n";
        let t = parse_prometheus_text(text.as_bytes(), &TraceSource::prometheus()).unwrap();
        assert!(t.samples.is_empty());
        assert_eq!(t.diagnostics.len(), 2);
        assert!(t
            .diagnostics
            .iter()
            .all(|d| matches!(d.kind, DiagnosticKind::UnpairedSample { .. })));
        assert_eq!(t.counts.dropped, 2);
    }

    #[test]
    fn prometheus_pairs_within_tolerance() {
        let text = "DCGM_FI_PROF_PIPE_TENSOR_ACTIVE{gpu=\"0\"} 0.5 1000\n\
DCGM_FI_DEV_SM_CLOCK{gpu=\"0\"} 1300 1900\n";
        let t = parse_prometheus_text(text.as_bytes(), &TraceSource::prometheus()).unwrap();
        assert_eq!(t.samples.len(), 1);
        assert_eq!(t.samples[0].timestamp, 1.0);
    }

    #[test]
    fn prometheus_percent_rescaled() {
        let text = "DCGM_FI_PROF_PIPE_TENSOR_ACTIVE{gpu=\"1\"} 55 1000\nDCGM_FI_DEV_SM_CLOCK{gpu=\"1\"} 1352 1000\n";
        let t = parse_prometheus_text(text.as_bytes(), &TraceSource::prometheus()).unwrap();
        assert_eq!(t.samples[0].tensor_active, 0.55);
        assert!(matches!(t.diagnostics[0].kind, DiagnosticKind::Rescaled { from } if from == 55.0));
    }

    #[test]
    fn prometheus_parse_error_offset() {
        let text = "DCGM_FI_DEV_SM_CLOCK{gpu=\"0\"} 1352 1000\nDCGM_FI_DEV_SM_CLOCK{gpu=\"0\" 1352\n";
        let t = parse_prometheus_text(text.as_bytes(), &TraceSource::prometheus()).unwrap();
        let err = t.rejections().next().unwrap();
        assert_eq!(err.line, 2);
        let second_line = text.find('\n').unwrap() + 1;
        assert_eq!(err.byte_offset, second_line + "DCGM_FI_DEV_SM_CLOCK{gpu=\"0\" ".len());
    }

    #[test]
    fn prometheus_custom_names_and_label() {
        let text = "act{card=\"3\"} 0.25 5000\nclk{card=\"3\"} 1500 5000\nother 1\n";
        let src = TraceSource {
            activity_metric: "act".into(),
            clock_metric: "clk".into(),
            gpu_label: "card".into(),
            ..TraceSource::prometheus()
        };
        let t = parse_prometheus_text(text.as_bytes(), &src).unwrap();
        assert_eq!(t.samples.len(), 1);
        assert_eq!(t.samples[0].gpu_id, "3");
        assert_eq!(t.counts.dropped, 1);
    }

    #[test]
    fn prometheus_without_timestamp() {
        let text = "DCGM_FI_PROF_PIPE_TENSOR_ACTIVE{gpu=\"0\"} 0.5\nDCGM_FI_DEV_SM_CLOCK{gpu=\"0\"} 1300\n";
        let t = parse_prometheus_text(text.as_bytes(), &TraceSource::prometheus()).unwrap();
        assert!(t.samples.is_empty());
        assert_eq!(t.counts.dropped, 2);
        let src = TraceSource {
            default_timestamp: Some(42.0),
            ..TraceSource::prometheus()
        };
        let t = parse_prometheus_text(text.as_bytes(), &src).unwrap();
        assert_eq!(t.samples[0].timestamp, 42.0);
    }

    #[test]
    fn exposition_line_grammar() {
        let l = parse_exposition_line(r#"m{a="x\"y",b="\\"} 1e3 17"#).unwrap();
        assert_eq!(l.labels, vec![("a".into(), "x\"y".into()), ("b".into(), "\\".into())]);
        assert_eq!(l.value, 1000.0);
        assert_eq!(l.timestamp_ms, Some(17));
        assert!(parse_exposition_line("m{} 1").is_ok());
        assert!(parse_exposition_line("m{a=\"1\",} 1").is_ok());
        assert!(parse_exposition_line("1m 1").is_err());
        assert!(parse_exposition_line("m").is_err());
        assert!(parse_exposition_line("m 1 2 3").is_err());
    }

    #[test]
    fn window_boundaries() {
        let w = JobWindow::new("j", 10.0, 20.0, ["g0".to_string()]).unwrap();
        let s = |t, g: &str| CounterSample::new(t, g, 0.5, 1000.0).unwrap();
        let kept: Vec<_> = align_to_window(vec![s(10.0, "g0"), s(20.0, "g0"), s(15.0, "g1")], &w).collect();
        assert_eq!(kept, vec![s(10.0, "g0")]);
        assert!(JobWindow::new("j", 5.0, 5.0, []).is_err());
    }

    #[test]
    fn window_file() {
        let ws = parse_windows("job_id,start,end,gpu_ids\nj1,0,100,g0;g1\nj2,100,200,\n".as_bytes()).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].gpu_ids.len(), 2);
        assert!(ws[1].gpu_ids.is_empty());
        assert!(parse_windows("job_id,start,end,gpu_ids\nj,5,1,\n".as_bytes()).is_err());
    }
}
