//! Line-delimited JSON trace files.
//!
//! ```text
//! {"session":"r01-mobilenet-training","interval_s":1.0,"sources":[...],...}
//! {"t":12.5,"source":"intel-rapl:0","kind":"energy_uj","value":123456}
//! {"t":12.5,"source":"gpu:0","kind":"watts","value":87.34}
//! ```
//!
//! The first line is the header; every following line is one sample. Sample
//! timestamps are monotonic seconds and are used verbatim on replay.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sources::{EnergyCounterReading, PowerSample, PowerSourceDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub session: String,
    pub interval_s: f64,
    pub sources: Vec<PowerSourceDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_run_threshold_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<u32>,
}

impl TraceHeader {
    pub fn new(session: impl Into<String>, interval_s: f64, sources: Vec<PowerSourceDescriptor>) -> Self {
        Self {
            session: session.into(),
            interval_s,
            sources,
            started_at: None,
            stopped_at: None,
            short_run_threshold_s: None,
            test: None,
            phase: None,
            repetition: None,
        }
    }
}

/// Per-source append-only observation log.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceLog {
    Power(Vec<PowerSample>),
    Counter(Vec<EnergyCounterReading>),
}

impl SourceLog {
    pub fn for_descriptor(d: &PowerSourceDescriptor) -> Self {
        if d.kind.is_cumulative() {
            SourceLog::Counter(Vec::new())
        } else {
            SourceLog::Power(Vec::new())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SourceLog::Power(v) => v.len(),
            SourceLog::Counter(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_t(&self) -> Option<f64> {
        match self {
            SourceLog::Power(v) => v.first().map(|s| s.t),
            SourceLog::Counter(v) => v.first().map(|r| r.t),
        }
    }

    pub fn last_t(&self) -> Option<f64> {
        match self {
            SourceLog::Power(v) => v.last().map(|s| s.t),
            SourceLog::Counter(v) => v.last().map(|r| r.t),
        }
    }
}

/// A parsed trace file: header plus one log per header source, in header
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedTrace {
    pub header: TraceHeader,
    pub logs: Vec<SourceLog>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace is empty (no header line)")]
    MissingHeader,
}

impl TraceError {
    fn at(line: usize, reason: impl Into<String>) -> Self {
        TraceError::Malformed {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Value {
    Count(u64),
    Real(f64),
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
enum RecordKind {
    #[serde(rename = "watts")]
    Watts,
    #[serde(rename = "energy_uj")]
    EnergyUj,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    t: f64,
    #[serde(borrow)]
    source: std::borrow::Cow<'a, str>,
    kind: RecordKind,
    value: Value,
}

/// Serialize `trace` to `writer`, merging source logs into time order.
pub fn write_trace<W: Write>(trace: &RecordedTrace, mut writer: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut writer, &trace.header)?;
    writer.write_all(b"\n")?;

    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (src, log) in trace.logs.iter().enumerate() {
        let times: Vec<f64> = match log {
            SourceLog::Power(v) => v.iter().map(|s| s.t).collect(),
            SourceLog::Counter(v) => v.iter().map(|r| r.t).collect(),
        };
        order.extend(times.into_iter().enumerate().map(|(i, t)| (t, src, i)));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    for (t, src, i) in order {
        let source = trace.header.sources[src].id.as_str().into();
        let record = match &trace.logs[src] {
            SourceLog::Power(v) => Record {
                t,
                source,
                kind: RecordKind::Watts,
                value: Value::Real(v[i].watts),
            },
            SourceLog::Counter(v) => Record {
                t,
                source,
                kind: RecordKind::EnergyUj,
                value: Value::Count(v[i].energy_uj),
            },
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Write atomically: temp file in the same directory, then rename.
pub fn persist_trace(trace: &RecordedTrace, path: &Path) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    write_trace(trace, BufWriter::new(tmp.as_file_mut())).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn parse_trace<R: BufRead>(reader: R) -> Result<RecordedTrace, TraceError> {
    let mut lines = reader.lines().enumerate();
    let header: TraceHeader = loop {
        match lines.next() {
            None => return Err(TraceError::MissingHeader),
            Some((i, line)) => {
                let line = line.map_err(|e| TraceError::at(i + 1, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| TraceError::at(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if !(header.interval_s > 0.0) {
        return Err(TraceError::at(1, "interval_s must be positive"));
    }
    for d in &header.sources {
        d.validate().map_err(|e| TraceError::at(1, e.to_string()))?;
    }

    let mut logs: Vec<SourceLog> = header.sources.iter().map(SourceLog::for_descriptor).collect();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| TraceError::at(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| TraceError::at(lineno, e.to_string()))?;
        if !rec.t.is_finite() {
            return Err(TraceError::at(lineno, "non-finite timestamp"));
        }
        let idx = header
            .sources
            .iter()
            .position(|d| d.id == rec.source)
            .ok_or_else(|| TraceError::at(lineno, format!("unknown source {:?}", rec.source)))?;
        if logs[idx].last_t().is_some_and(|last| rec.t < last) {
            return Err(TraceError::at(lineno, format!("timestamp goes backwards for {}", rec.source)));
        }
        match (&mut logs[idx], rec.kind, rec.value) {
            (SourceLog::Power(v), RecordKind::Watts, value) => {
                let watts = match value {
                    Value::Count(n) => n as f64,
                    Value::Real(w) => w,
                };
                if !(watts >= 0.0 && watts.is_finite()) {
                    return Err(TraceError::at(lineno, format!("invalid power {watts}")));
                }
                v.push(PowerSample { t: rec.t, watts });
            }
            (SourceLog::Counter(v), RecordKind::EnergyUj, Value::Count(energy_uj)) => {
                let max = header.sources[idx].max_energy_range_uj.unwrap_or(u64::MAX);
                if energy_uj >= max {
                    return Err(TraceError::at(lineno, format!("counter {energy_uj} outside [0, {max})")));
                }
                v.push(EnergyCounterReading { t: rec.t, energy_uj });
            }
            (SourceLog::Counter(_), RecordKind::EnergyUj, Value::Real(x)) => {
                return Err(TraceError::at(lineno, format!("energy_uj must be an unsigned integer, got {x}")));
            }
            _ => {
                return Err(TraceError::at(
                    lineno,
                    format!("record kind does not match source {}", rec.source),
                ))
            }
        }
    }
    Ok(RecordedTrace { header, logs })
}

pub fn read_trace(path: &Path) -> Result<RecordedTrace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_trace(BufReader::new(file))
}
