//! Suite orchestration.
//!
//! For every repetition, tests run in configuration order; each test runs
//! its untracked warm-up, then its training phase, then its inference
//! phase, each inside its own tracking session. Records come back in
//! execution order and are appended to `records.jsonl` as they complete.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod backend;
pub mod budget;
pub mod catalog;
pub mod workload;

pub use backend::{Backend, BackendConfig, BackendError, BackendKind};
pub use budget::{enforce_budget, watchdog_hook, BudgetScope, EnergyBudget, StopSignal};
pub use catalog::{CatalogError, ModelCatalog, ModelCatalogEntry, Task};
pub use workload::{calibrate_work_scale, synthetic_rounds, synthetic_workload, ExternalCommand};

use crate::accounting::{compute_emissions, joules_to_kwh, EmissionParams, EmissionRecord};
use crate::tracker::trace::RecordedTrace;
use crate::tracker::{
    start_tracking_with, TrackingSession, EnergyReading, SessionLabels, SessionOptions, TrackerConfig, TrackerError,
    DEFAULT_INTERVAL_S, DEFAULT_PLAUSIBLE_MAX_POWER_W, DEFAULT_SHORT_RUN_THRESHOLD_S,
};

pub const DEFAULT_REPETITIONS: u32 = 10;
pub const DEFAULT_WARMUP_RUNS: u32 = 1;
pub const DEFAULT_GRACE_PERIOD_S: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Inference,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Inference => "inference",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "training" => Ok(Phase::Training),
            "inference" => Ok(Phase::Inference),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Synthetic {
        model: String,
        /// None means calibrate on this machine before the suite starts.
        work_scale: Option<f64>,
    },
    External {
        command: String,
        workdir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub name: String,
    pub workload: Workload,
    pub phases: Vec<Phase>,
    /// Items processed per phase, for per-item energy.
    pub item_count: Option<u64>,
}

impl TestSpec {
    pub fn synthetic(model: &str, work_scale: Option<f64>) -> Self {
        Self {
            name: model.to_owned(),
            workload: Workload::Synthetic {
                model: model.to_owned(),
                work_scale,
            },
            phases: vec![Phase::Training, Phase::Inference],
            item_count: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |reason: &str| HarnessError::BadTest {
            test: self.name.clone(),
            reason: reason.to_owned(),
        };
        if self.name.is_empty() {
            return Err(bad("empty test name"));
        }
        if self.phases.is_empty() {
            return Err(bad("no phases"));
        }
        if self.phases.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("phases must be unique and ordered training before inference"));
        }
        if self.item_count == Some(0) {
            return Err(bad("item_count must be positive"));
        }
        match &self.workload {
            Workload::Synthetic { work_scale: Some(s), .. } if !(*s > 0.0 && s.is_finite()) => {
                Err(bad("work_scale must be positive"))
            }
            Workload::External { command, .. } if command.trim().is_empty() => Err(bad("empty command")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub name: String,
    pub tests: Vec<TestSpec>,
    pub repetitions: u32,
    pub warmup_runs: u32,
    pub emission: EmissionParams,
    pub backend: BackendConfig,
    pub interval_s: f64,
    /// The interval was not set anywhere and fell back to the default.
    pub interval_is_default: bool,
    pub short_run_threshold_s: f64,
    pub plausible_max_power_w: f64,
    pub grace_period_s: f64,
    pub budget: Option<EnergyBudget>,
    /// Catalog additions and overrides.
    pub models: Vec<ModelCatalogEntry>,
    pub output_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            name: "suite".into(),
            tests: Vec::new(),
            repetitions: DEFAULT_REPETITIONS,
            warmup_runs: DEFAULT_WARMUP_RUNS,
            emission: EmissionParams::default(),
            backend: BackendConfig::default(),
            interval_s: DEFAULT_INTERVAL_S,
            interval_is_default: true,
            short_run_threshold_s: DEFAULT_SHORT_RUN_THRESHOLD_S,
            plausible_max_power_w: DEFAULT_PLAUSIBLE_MAX_POWER_W,
            grace_period_s: DEFAULT_GRACE_PERIOD_S,
            budget: None,
            models: Vec::new(),
            output_dir: None,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<ModelCatalog, HarnessError> {
        if self.tests.is_empty() {
            return Err(HarnessError::Config("suite has no tests".into()));
        }
        if self.repetitions == 0 {
            return Err(HarnessError::Config("repetitions must be >= 1".into()));
        }
        if !(self.interval_s > 0.0 && self.interval_s.is_finite()) {
            return Err(HarnessError::Config(format!("interval_s must be positive, got {}", self.interval_s)));
        }
        if !(self.grace_period_s >= 0.0 && self.grace_period_s.is_finite()) {
            return Err(HarnessError::Config("grace_period_s must be >= 0".into()));
        }
        self.emission
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let catalog = ModelCatalog::with_entries(&self.models)?;
        for (i, t) in self.tests.iter().enumerate() {
            t.validate()?;
            if self.tests[..i].iter().any(|o| o.name == t.name) {
                return Err(HarnessError::Config(format!("test {:?} listed twice", t.name)));
            }
            if let Workload::Synthetic { model, .. } = &t.workload {
                if catalog.get(model).is_none() {
                    return Err(HarnessError::UnknownModel(model.clone()));
                }
            }
        }
        Ok(catalog)
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            interval_s: self.interval_s,
            short_run_threshold_s: self.short_run_threshold_s,
            plausible_max_power_w: self.plausible_max_power_w,
            trace_dir: self.output_dir.as_ref().map(|d| d.join("traces")),
        }
    }
}

/// Details of a budget-triggered stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetStop {
    /// Session time of the tick that exceeded the budget.
    pub signal_elapsed_s: f64,
    /// Running estimate at that tick, this phase only.
    pub estimate_joules_at_signal: f64,
    /// Session time the workload finished winding down.
    pub terminated_elapsed_s: f64,
    /// Energy measured between the signal tick and session close.
    pub grace_energy_j: f64,
    /// Measured energy beyond the limit (suite offset included).
    pub overshoot_joules: f64,
    pub forced_kill: bool,
    pub max_power_w: f64,
}

/// One measured (test, phase, repetition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub test_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub phase: Phase,
    /// 1-based.
    pub repetition_index: u32,
    pub session_id: String,
    pub duration_s: f64,
    pub energy: EnergyReading,
    pub emissions: EmissionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_scale: Option<f64>,
    pub stopped_by_budget: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_stop: Option<BudgetStop>,
    /// Workload diagnostics when the phase failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Trace file name inside the `traces` directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_file: Option<String>,
}

impl PhaseRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("phase {phase} is not part of test {test:?}")]
    PhaseNotInTest { test: String, phase: Phase },
    #[error("test {test:?}: {reason}")]
    BadTest { test: String, reason: String },
    #[error("invalid suite: {0}")]
    Config(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Everything a single phase needs besides the test itself.
pub struct PhaseContext<'a> {
    pub backend: &'a Backend,
    pub catalog: &'a ModelCatalog,
    pub tracker: TrackerConfig,
    pub emission: EmissionParams,
    pub repetition: u32,
    pub budget: Option<EnergyBudget>,
    /// Energy already spent in the suite, counted against per-suite budgets.
    pub budget_offset_joules: f64,
    pub grace: Duration,
}

fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_owned()
}

pub fn session_id(test: &str, phase: Phase, repetition: u32) -> String {
    format!("r{repetition:02}-{}-{phase}", slug(test))
}

fn resolve_scale(test: &TestSpec, entry: &ModelCatalogEntry, threshold_s: f64) -> f64 {
    match &test.workload {
        Workload::Synthetic { work_scale: Some(s), .. } => *s,
        _ => calibrate_work_scale(entry, Phase::Inference, threshold_s),
    }
}

fn external_env(test: &TestSpec, phase: &str, repetition: u32) -> Vec<(String, String)> {
    vec![
        ("JM_PHASE".into(), phase.to_owned()),
        ("JM_TEST".into(), test.name.clone()),
        ("JM_REPETITION".into(), repetition.to_string()),
    ]
}

/// Run one phase of `test` inside its own tracking session.
///
/// A workload that fails yields a record with `failure` set; errors are
/// reserved for preconditions and sessions that could not be started.
pub fn run_phase(test: &TestSpec, phase: Phase, ctx: &PhaseContext<'_>) -> Result<PhaseRecord, HarnessError> {
    if !test.phases.contains(&phase) {
        return Err(HarnessError::PhaseNotInTest {
            test: test.name.clone(),
            phase,
        });
    }
    test.validate()?;
    let entry = match &test.workload {
        Workload::Synthetic { model, .. } => Some(
            ctx.catalog
                .get(model)
                .ok_or_else(|| HarnessError::UnknownModel(model.clone()))?,
        ),
        Workload::External { .. } => None,
    };
    let work_scale = entry.map(|e| resolve_scale(test, e, ctx.tracker.short_run_threshold_s));

    let id = session_id(&test.name, phase, ctx.repetition);
    if let Some(dir) = &ctx.tracker.trace_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let signal = StopSignal::new();
    let on_tick = ctx
        .budget
        .map(|b| watchdog_hook(b, ctx.budget_offset_joules, Arc::clone(&signal)));
    let mut session = start_tracking_with(
        ctx.backend.open_sources()?,
        &ctx.tracker,
        SessionOptions {
            session_id: Some(id.clone()),
            labels: SessionLabels {
                test: Some(test.name.clone()),
                phase: Some(phase.to_string()),
                repetition: Some(ctx.repetition),
            },
            on_tick,
        },
    )?;
    let started_at = session.started_at();

    let mut failure = None;
    let mut forced_kill = false;
    let exited_at = match (&test.workload, entry) {
        (Workload::Synthetic { .. }, Some(entry)) => {
            let rounds = synthetic_rounds(entry, phase, work_scale.unwrap_or(1.0));
            workload::run_synthetic_rounds(rounds, Some(&signal));
            crate::clock::monotonic_now()
        }
        (Workload::External { command, workdir }, _) => {
            let cmd = ExternalCommand {
                command: command.clone(),
                workdir: workdir.clone(),
                env: external_env(test, phase.as_str(), ctx.repetition),
            };
            let logs = ctx
                .tracker
                .trace_dir
                .as_ref()
                .map(|d| (d.join(format!("{id}.stdout.log")), d.join(format!("{id}.stderr.log"))));
            let run = workload::run_external(
                &cmd,
                logs.as_ref().map(|l| l.0.as_path()),
                logs.as_ref().map(|l| l.1.as_path()),
                Some(&signal),
                ctx.grace,
            );
            match run {
                Ok(r) => {
                    forced_kill = r.forced_kill;
                    if !r.status.success() && !r.terminated {
                        let mut msg = format!("command exited with {}", r.status);
                        if let Some((_, err)) = &logs {
                            let tail = fs::read_to_string(err).unwrap_or_default();
                            let tail = tail.trim_end();
                            if !tail.is_empty() {
                                let start = tail.len().saturating_sub(2000);
                                let start = (start..tail.len()).find(|&i| tail.is_char_boundary(i)).unwrap_or(0);
                                msg.push_str(&format!("; stderr: {}", &tail[start..]));
                            }
                        }
                        failure = Some(msg);
                    }
                    r.exited_at
                }
                Err(e) => {
                    failure = Some(format!("could not run command: {e}"));
                    crate::clock::monotonic_now()
                }
            }
        }
        (Workload::Synthetic { model, .. }, None) => return Err(HarnessError::UnknownModel(model.clone())),
    };

    let reading = session.stop()?;
    let trigger = signal.trigger();
    let budget_stop = trigger.map(|t| {
        let max_power_w = signal
            .last_snapshot()
            .map_or(t.snapshot.max_power_w, |s| s.max_power_w);
        let limit = ctx.budget.map_or(0.0, |b| b.limit_joules);
        BudgetStop {
            signal_elapsed_s: t.snapshot.elapsed_s,
            estimate_joules_at_signal: t.snapshot.cumulative_joules,
            terminated_elapsed_s: exited_at - started_at,
            grace_energy_j: (reading.total_joules - t.snapshot.cumulative_joules).max(0.0),
            overshoot_joules: ctx.budget_offset_joules + reading.total_joules - limit,
            forced_kill,
            max_power_w,
        }
    });
    let emissions = compute_emissions(joules_to_kwh(reading.total_joules), &ctx.emission);
    Ok(PhaseRecord {
        test_name: test.name.clone(),
        model: entry.map(|e| e.name.clone()),
        phase,
        repetition_index: ctx.repetition,
        session_id: id,
        duration_s: reading.duration_s,
        energy: reading,
        emissions,
        item_count: test.item_count,
        work_scale,
        stopped_by_budget: budget_stop.is_some(),
        budget_stop,
        failure,
        trace_file: session
            .trace_path()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned()),
    })
}

/// A phase that did not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPhase {
    pub test_name: String,
    pub phase: Phase,
    pub repetition_index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub records: Vec<PhaseRecord>,
    /// Work scale used per synthetic test (configured or calibrated).
    pub work_scales: BTreeMap<String, f64>,
    pub skipped: Vec<SkippedPhase>,
    pub budget_exhausted: bool,
    pub started_at: String,
    pub finished_at: String,
}

impl SuiteOutcome {
    pub fn failed_phases(&self) -> usize {
        self.records.iter().filter(|r| r.failed()).count()
            + self.skipped.iter().filter(|s| !s.reason.starts_with("budget")).count()
    }
}

fn warm_up(test: &TestSpec, entry: Option<&ModelCatalogEntry>, scale: Option<f64>, repetition: u32, grace: Duration) {
    let phase = test.phases.last().copied().unwrap_or(Phase::Inference);
    match (&test.workload, entry) {
        (Workload::Synthetic { .. }, Some(e)) => {
            synthetic_workload(e, phase, scale.unwrap_or(1.0));
        }
        (Workload::External { command, workdir }, _) => {
            let cmd = ExternalCommand {
                command: command.clone(),
                workdir: workdir.clone(),
                env: external_env(test, "warmup", repetition),
            };
            if let Err(e) = workload::run_external(&cmd, None, None, None, grace) {
                log::warn!("warm-up of {} failed: {e}", test.name);
            }
        }
        _ => {}
    }
}

/// Execute the whole suite against `backend`.
///
/// The backend is probed before any workload runs; a failing probe aborts
/// the suite. Afterwards failures are recorded and the suite continues.
pub fn run_suite(config: &SuiteConfig, backend: &Backend) -> Result<SuiteOutcome, HarnessError> {
    let catalog = config.validate()?;
    backend.check()?;
    let started_at = crate::clock::wall_clock();

    let mut records_file = match &config.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("records.jsonl");
            Some((
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(io_err(&path))?,
                path,
            ))
        }
        None => None,
    };

    let mut work_scales = BTreeMap::new();
    for t in &config.tests {
        if let Workload::Synthetic { model, .. } = &t.workload {
            let entry = catalog.get(model).ok_or_else(|| HarnessError::UnknownModel(model.clone()))?;
            let scale = resolve_scale(t, entry, config.short_run_threshold_s);
            log::info!("{}: work_scale {scale}", t.name);
            work_scales.insert(t.name.clone(), scale);
        }
    }
    let tests: Vec<TestSpec> = config
        .tests
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if let Workload::Synthetic { work_scale, .. } = &mut t.workload {
                *work_scale = work_scales.get(&t.name).copied();
            }
            t
        })
        .collect();

    let grace = Duration::from_secs_f64(config.grace_period_s);
    let suite_budget = config.budget.filter(|b| b.scope == BudgetScope::PerSuite);
    let mut spent = 0.0;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut budget_exhausted = false;

    for repetition in 1..=config.repetitions {
        for test in &tests {
            let entry = match &test.workload {
                Workload::Synthetic { model, .. } => catalog.get(model),
                Workload::External { .. } => None,
            };
            if !budget_exhausted {
                for _ in 0..config.warmup_runs {
                    warm_up(test, entry, work_scales.get(&test.name).copied(), repetition, grace);
                }
            }
            for &phase in &test.phases {
                if budget_exhausted {
                    skipped.push(SkippedPhase {
                        test_name: test.name.clone(),
                        phase,
                        repetition_index: repetition,
                        reason: "budget exhausted".into(),
                    });
                    continue;
                }
                let ctx = PhaseContext {
                    backend,
                    catalog: &catalog,
                    tracker: config.tracker_config(),
                    emission: config.emission,
                    repetition,
                    budget: config.budget,
                    budget_offset_joules: if suite_budget.is_some() { spent } else { 0.0 },
                    grace,
                };
                match run_phase(test, phase, &ctx) {
                    Ok(record) => {
                        if let Some(f) = &record.failure {
                            log::warn!("{} {phase} repetition {repetition} failed: {f}", test.name);
                        }
                        spent += record.energy.total_joules;
                        if let Some((file, path)) = records_file.as_mut() {
                            let line = serde_json::to_string(&record).expect("record serializes");
                            writeln!(file, "{line}").map_err(io_err(path))?;
                            file.flush().map_err(io_err(path))?;
                        }
                        if suite_budget.is_some() && record.stopped_by_budget {
                            budget_exhausted = true;
                        }
                        records.push(record);
                    }
                    Err(e) => {
                        log::error!("{} {phase} repetition {repetition}: {e}", test.name);
                        skipped.push(SkippedPhase {
                            test_name: test.name.clone(),
                            phase,
                            repetition_index: repetition,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
    }

    Ok(SuiteOutcome {
        records,
        work_scales,
        skipped,
        budget_exhausted,
        started_at,
        finished_at: crate::clock::wall_clock(),
    })
}

/// Rebuild the record of a persisted session. Test name, phase and
/// repetition come from the trace header, falling back to the session id,
/// inference and 1.
pub fn record_from_trace(
    trace: RecordedTrace,
    emission: &EmissionParams,
    short_run_threshold_s: Option<f64>,
) -> Result<PhaseRecord, HarnessError> {
    let session = TrackingSession::from_trace(trace, short_run_threshold_s)?;
    let reading = session.reading().cloned().expect("replayed session carries its reading");
    let labels = session.labels();
    let phase = match labels.phase.as_deref() {
        Some(p) => p.parse().map_err(|reason| HarnessError::BadTest {
            test: session.id().to_owned(),
            reason,
        })?,
        None => Phase::Inference,
    };
    Ok(PhaseRecord {
        test_name: labels.test.clone().unwrap_or_else(|| session.id().to_owned()),
        model: None,
        phase,
        repetition_index: labels.repetition.unwrap_or(1),
        session_id: session.id().to_owned(),
        duration_s: reading.duration_s,
        emissions: compute_emissions(joules_to_kwh(reading.total_joules), emission),
        energy: reading,
        item_count: None,
        work_scale: None,
        stopped_by_budget: false,
        budget_stop: None,
        failure: None,
        trace_file: None,
    })
}

/// Read back `records.jsonl`.
pub fn read_records(path: &Path) -> Result<Vec<PhaseRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Io {
                path: path.to_owned(),
                source: io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)),
            })
        })
        .collect()
}
