//! Background sampling sessions around a tracked code region.
//!
//! [`start_tracking`] takes anchor readings of every source synchronously and
//! spawns one sampler thread that polls all sources every `interval_s`.
//! [`TrackingSession::stop`] joins the sampler, takes final readings and
//! integrates each source log: counters by summed deltas, power sources by
//! the trapezoidal rule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod integrate;
pub mod trace;

pub use integrate::{
    accumulate_counter_trace, accumulate_counter_trace_uj, integrate_power_trace, short_run_warning,
    IntegrationError, DEFAULT_SHORT_RUN_THRESHOLD_S,
};
use trace::{RecordedTrace, SourceLog, TraceError, TraceHeader};

use crate::clock::monotonic_now;
use crate::sources::{
    check_wrap_safety, counter_delta, PowerSource, PowerSourceDescriptor, Reading, SourceError,
};

pub const DEFAULT_INTERVAL_S: f64 = 1.0;
pub const DEFAULT_PLAUSIBLE_MAX_POWER_W: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub interval_s: f64,
    pub short_run_threshold_s: f64,
    /// Upper bound on per-source power used by the counter wrap check.
    pub plausible_max_power_w: f64,
    /// Where stopped sessions are persisted as `<session>.trace.jsonl`.
    pub trace_dir: Option<PathBuf>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            interval_s: DEFAULT_INTERVAL_S,
            short_run_threshold_s: DEFAULT_SHORT_RUN_THRESHOLD_S,
            plausible_max_power_w: DEFAULT_PLAUSIBLE_MAX_POWER_W,
            trace_dir: None,
        }
    }
}

/// Integrated energy of one stopped session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReading {
    /// Top-level sources only; these make up `total_joules`.
    pub per_source_joules: BTreeMap<String, f64>,
    /// Powercap subdomains, reported separately and excluded from the total.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subdomain_joules: BTreeMap<String, f64>,
    pub total_joules: f64,
    pub duration_s: f64,
    pub sample_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Running estimate handed to the tick hook after every sampling tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySnapshot {
    pub tick: u64,
    pub elapsed_s: f64,
    /// Cumulative energy of top-level sources since the session anchors.
    pub cumulative_joules: f64,
    /// Total top-level power over the last tick.
    pub power_w: f64,
    pub max_power_w: f64,
}

pub type TickHook = Box<dyn FnMut(&EnergySnapshot) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Running,
    Stopped,
}

/// Optional identity attached to a session and its trace file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLabels {
    pub test: Option<String>,
    pub phase: Option<String>,
    pub repetition: Option<u32>,
}

#[derive(Default)]
pub struct SessionOptions {
    pub session_id: Option<String>,
    pub labels: SessionLabels,
    pub on_tick: Option<TickHook>,
}

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("a tracking session needs at least one source")]
    NoSources,
    #[error("sampling interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("duplicate source id {0}")]
    DuplicateSource(String),
    #[error("wrap-safety check failed: {0}")]
    WrapUnsafe(#[source] SourceError),
    #[error("first read failed, session not started: {0}")]
    StartRead(#[source] SourceError),
    #[error("session {0} is not running")]
    NotRunning(String),
    #[error("sampler thread of session {0} panicked")]
    SamplerPanicked(String),
    #[error("trace of session {session}: {source}")]
    Trace {
        session: String,
        #[source]
        source: TraceError,
    },
    #[error("trace of session {session} is inconsistent: {reason}")]
    BadTrace { session: String, reason: String },
}

struct Sampler {
    sources: Vec<Box<dyn PowerSource>>,
    logs: Vec<SourceLog>,
    counted: Vec<bool>,
    cumulative_joules: f64,
    max_power_w: f64,
    warnings: Vec<String>,
    hook: Option<TickHook>,
    started_at: f64,
}

impl Sampler {
    fn append(&mut self, i: usize, reading: Reading) -> Option<(f64, f64)> {
        let counted = self.counted[i];
        let max = self.sources[i].descriptor().max_energy_range_uj;
        match (&mut self.logs[i], reading) {
            (SourceLog::Power(v), Reading::Power(s)) => {
                if v.last().is_some_and(|p| s.t <= p.t) {
                    return None;
                }
                let step = v.last().map(|p| (0.5 * (p.watts + s.watts) * (s.t - p.t), s.watts));
                v.push(s);
                step.filter(|_| counted)
            }
            (SourceLog::Counter(v), Reading::Counter(r)) => {
                if v.last().is_some_and(|p| r.t < p.t) {
                    return None;
                }
                let step = v.last().map(|p| {
                    let j = counter_delta(p, &r, max.unwrap_or(u64::MAX)) as f64 / 1e6;
                    let dt = r.t - p.t;
                    (j, if dt > 0.0 { j / dt } else { 0.0 })
                });
                v.push(r);
                step.filter(|_| counted)
            }
            _ => {
                let id = &self.sources[i].descriptor().id;
                self.warnings.push(format!("source {id} returned a reading of the wrong kind"));
                None
            }
        }
    }

    fn tick(&mut self, tick: u64) {
        let mut power = 0.0;
        for i in 0..self.sources.len() {
            match self.sources[i].read() {
                Ok(reading) => {
                    if let Some((joules, watts)) = self.append(i, reading) {
                        self.cumulative_joules += joules;
                        power += watts;
                    }
                }
                Err(e) => self.warnings.push(format!("tick {tick}: {e}")),
            }
        }
        self.max_power_w = self.max_power_w.max(power);
        if let Some(hook) = self.hook.as_mut() {
            hook(&EnergySnapshot {
                tick,
                elapsed_s: monotonic_now() - self.started_at,
                cumulative_joules: self.cumulative_joules,
                power_w: power,
                max_power_w: self.max_power_w,
            });
        }
    }

    fn run(mut self, interval_s: f64, stop: mpsc::Receiver<()>) -> Self {
        let mut tick = 1u64;
        loop {
            let due = self.started_at + tick as f64 * interval_s;
            let wait = (due - monotonic_now()).max(0.0);
            match stop.recv_timeout(Duration::from_secs_f64(wait)) {
                Ok(()) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
            self.tick(tick);
            // skip ticks missed while a slow source was being read
            let elapsed = monotonic_now() - self.started_at;
            tick = tick.max((elapsed / interval_s).floor() as u64) + 1;
        }
        self
    }
}

struct Running {
    stop_tx: mpsc::Sender<()>,
    handle: JoinHandle<Sampler>,
}

pub struct TrackingSession {
    session_id: String,
    labels: SessionLabels,
    descriptors: Vec<PowerSourceDescriptor>,
    interval_s: f64,
    short_run_threshold_s: f64,
    started_at: f64,
    stopped_at: Option<f64>,
    logs: Vec<SourceLog>,
    warnings: Vec<String>,
    state: SessionState,
    running: Option<Running>,
    trace_dir: Option<PathBuf>,
    trace_path: Option<PathBuf>,
    reading: Option<EnergyReading>,
}

fn next_session_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    format!("session-{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed))
}

pub fn start_tracking(sources: Vec<Box<dyn PowerSource>>, config: &TrackerConfig) -> Result<TrackingSession, TrackerError> {
    start_tracking_with(sources, config, SessionOptions::default())
}

/// Start a session with an explicit id, labels and an optional tick hook.
pub fn start_tracking_with(
    mut sources: Vec<Box<dyn PowerSource>>,
    config: &TrackerConfig,
    options: SessionOptions,
) -> Result<TrackingSession, TrackerError> {
    if sources.is_empty() {
        return Err(TrackerError::NoSources);
    }
    if !(config.interval_s > 0.0 && config.interval_s.is_finite()) {
        return Err(TrackerError::BadInterval(config.interval_s));
    }
    let descriptors: Vec<PowerSourceDescriptor> = sources.iter().map(|s| s.descriptor().clone()).collect();
    for (i, d) in descriptors.iter().enumerate() {
        if descriptors[..i].iter().any(|o| o.id == d.id) {
            return Err(TrackerError::DuplicateSource(d.id.clone()));
        }
        check_wrap_safety(d, config.interval_s, config.plausible_max_power_w).map_err(TrackerError::WrapUnsafe)?;
    }

    let started_at = monotonic_now();
    let mut logs: Vec<SourceLog> = descriptors.iter().map(SourceLog::for_descriptor).collect();
    for (src, log) in sources.iter_mut().zip(logs.iter_mut()) {
        match (src.read().map_err(TrackerError::StartRead)?, log) {
            (Reading::Power(s), SourceLog::Power(v)) => v.push(s),
            (Reading::Counter(r), SourceLog::Counter(v)) => v.push(r),
            _ => {
                return Err(TrackerError::StartRead(SourceError::Invalid {
                    id: src.descriptor().id.clone(),
                    reason: "reading kind does not match descriptor kind".into(),
                }))
            }
        }
    }

    let session_id = options.session_id.unwrap_or_else(next_session_id);
    let sampler = Sampler {
        counted: descriptors.iter().map(|d| !d.is_subdomain()).collect(),
        sources,
        logs,
        cumulative_joules: 0.0,
        max_power_w: 0.0,
        warnings: Vec::new(),
        hook: options.on_tick,
        started_at,
    };
    let (stop_tx, stop_rx) = mpsc::channel();
    let interval_s = config.interval_s;
    let handle = thread::Builder::new()
        .name(format!("sampler-{session_id}"))
        .spawn(move || sampler.run(interval_s, stop_rx))
        .expect("spawn sampler thread");

    Ok(TrackingSession {
        session_id,
        labels: options.labels,
        descriptors,
        interval_s,
        short_run_threshold_s: config.short_run_threshold_s,
        started_at,
        stopped_at: None,
        logs: Vec::new(),
        warnings: Vec::new(),
        state: SessionState::Running,
        running: Some(Running { stop_tx, handle }),
        trace_dir: config.trace_dir.clone(),
        trace_path: None,
        reading: None,
    })
}

impl TrackingSession {
    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn sources(&self) -> &[PowerSourceDescriptor] {
        &self.descriptors
    }

    pub fn interval_s(&self) -> f64 {
        self.interval_s
    }

    pub fn started_at(&self) -> f64 {
        self.started_at
    }

    pub fn stopped_at(&self) -> Option<f64> {
        self.stopped_at
    }

    /// Sample logs; empty while the session is running.
    pub fn logs(&self) -> &[SourceLog] {
        &self.logs
    }

    pub fn reading(&self) -> Option<&EnergyReading> {
        self.reading.as_ref()
    }

    pub fn trace_path(&self) -> Option<&Path> {
        self.trace_path.as_deref()
    }

    /// Stop sampling, take final readings, integrate and persist.
    pub fn stop(&mut self) -> Result<EnergyReading, TrackerError> {
        let running = self
            .running
            .take()
            .ok_or_else(|| TrackerError::NotRunning(self.session_id.clone()))?;
        let _ = running.stop_tx.send(());
        let mut sampler = running
            .handle
            .join()
            .map_err(|_| TrackerError::SamplerPanicked(self.session_id.clone()))?;

        let stopped_at = monotonic_now();
        for i in 0..sampler.sources.len() {
            match sampler.sources[i].read() {
                Ok(reading) => {
                    sampler.append(i, reading);
                }
                Err(e) => sampler.warnings.push(format!("final read: {e}")),
            }
        }

        self.stopped_at = Some(stopped_at);
        self.logs = std::mem::take(&mut sampler.logs);
        self.warnings = std::mem::take(&mut sampler.warnings);
        self.state = SessionState::Stopped;

        let reading = self.compute_reading();
        self.reading = Some(reading.clone());
        if let Some(dir) = self.trace_dir.clone() {
            let path = dir.join(format!("{}.trace.jsonl", self.session_id));
            trace::persist_trace(&self.to_trace(), &path).map_err(|source| TrackerError::Trace {
                session: self.session_id.clone(),
                source,
            })?;
            self.trace_path = Some(path);
        }
        Ok(reading)
    }

    /// Duration, per-source energies and warnings from the stopped logs.
    fn compute_reading(&self) -> EnergyReading {
        let duration_s = self.stopped_at.unwrap_or(self.started_at) - self.started_at;
        let mut reading = EnergyReading {
            per_source_joules: BTreeMap::new(),
            subdomain_joules: BTreeMap::new(),
            total_joules: 0.0,
            duration_s,
            sample_counts: BTreeMap::new(),
            warnings: self.warnings.clone(),
        };
        for (d, log) in self.descriptors.iter().zip(&self.logs) {
            let result = match log {
                SourceLog::Power(v) => integrate_power_trace(v),
                SourceLog::Counter(v) => accumulate_counter_trace(v, d.max_energy_range_uj.unwrap_or(u64::MAX)),
            };
            let joules = match result {
                Ok(j) => j,
                Err(e) => {
                    reading.warnings.push(format!("source {}: {e}; energy set to 0", d.id));
                    0.0
                }
            };
            if log.len() == 2 {
                reading.warnings.push(format!(
                    "source {}: no samples between the start and stop anchors; energy from anchors only",
                    d.id
                ));
            }
            reading.sample_counts.insert(d.id.clone(), log.len());
            if d.is_subdomain() {
                reading.subdomain_joules.insert(d.id.clone(), joules);
            } else {
                reading.per_source_joules.insert(d.id.clone(), joules);
            }
        }
        reading.total_joules = reading.per_source_joules.values().sum();
        if let Some(w) = short_run_warning(duration_s, self.short_run_threshold_s) {
            reading.warnings.push(w);
        }
        reading
    }

    /// The persisted form of a stopped session.
    pub fn to_trace(&self) -> RecordedTrace {
        let mut header = TraceHeader::new(self.session_id.clone(), self.interval_s, self.descriptors.clone());
        header.started_at = Some(self.started_at);
        header.stopped_at = self.stopped_at;
        header.short_run_threshold_s = Some(self.short_run_threshold_s);
        header.test = self.labels.test.clone();
        header.phase = self.labels.phase.clone();
        header.repetition = self.labels.repetition;
        RecordedTrace {
            header,
            logs: self.logs.clone(),
        }
    }

    /// Rebuild a stopped session from a recorded trace.
    ///
    /// Timestamps come from the file. Without explicit `started_at` /
    /// `stopped_at` in the header the window spans the earliest and latest
    /// samples. `short_run_threshold_s` falls back to the header value, then
    /// to the default.
    pub fn from_trace(trace: RecordedTrace, short_run_threshold_s: Option<f64>) -> Result<Self, TrackerError> {
        let RecordedTrace { header, logs } = trace;
        let bad = |reason: String| TrackerError::BadTrace {
            session: header.session.clone(),
            reason,
        };
        if header.sources.is_empty() {
            return Err(bad("no sources".into()));
        }
        let first = logs.iter().filter_map(SourceLog::first_t).fold(f64::INFINITY, f64::min);
        let last = logs.iter().filter_map(SourceLog::last_t).fold(f64::NEG_INFINITY, f64::max);
        let started_at = header.started_at.unwrap_or(first);
        let stopped_at = header.stopped_at.unwrap_or(last);
        if !(started_at.is_finite() && stopped_at.is_finite() && stopped_at > started_at) {
            return Err(bad("trace does not span a positive time window".into()));
        }
        Ok(Self {
            session_id: header.session.clone(),
            labels: SessionLabels {
                test: header.test.clone(),
                phase: header.phase.clone(),
                repetition: header.repetition,
            },
            short_run_threshold_s: short_run_threshold_s
                .or(header.short_run_threshold_s)
                .unwrap_or(DEFAULT_SHORT_RUN_THRESHOLD_S),
            interval_s: header.interval_s,
            descriptors: header.sources,
            started_at,
            stopped_at: Some(stopped_at),
            logs,
            warnings: Vec::new(),
            state: SessionState::Stopped,
            running: None,
            trace_dir: None,
            trace_path: None,
            reading: None,
        })
        .map(|mut s| {
            s.reading = Some(s.compute_reading());
            s
        })
    }

    pub fn labels(&self) -> &SessionLabels {
        &self.labels
    }
}

impl Drop for TrackingSession {
    fn drop(&mut self) {
        if let Some(running) = self.running.take() {
            let _ = running.stop_tx.send(());
            let _ = running.handle.join();
        }
    }
}
