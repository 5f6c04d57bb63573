//! Energy, CO2 and duration measurement for phased benchmark workloads.
//!
//! The crate is split along the measurement pipeline:
//!
//! - [`sources`]: power and energy observation channels (powercap RAPL
//!   counters, `nvidia-smi` GPU power, simulated analytic traces, replay).
//! - [`tracker`]: background sampling sessions that bracket a code region and
//!   integrate the collected samples into joules.
//! - [`harness`]: suite orchestration (training then inference per test,
//!   repeated), synthetic and external workloads, and the energy budget
//!   watchdog.
//! - [`accounting`]: kWh/CO2 conversion, repetition statistics and report
//!   emission.
//! - [`config`]: the suite configuration file.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod clock;
pub mod config;
pub mod harness;
pub mod sources;
pub mod tracker;

pub use accounting::{
    compute_emissions, joules_to_kwh, per_item_energy, summarize, EmissionParams, EmissionRecord,
    SummaryStats,
};
pub use harness::{run_phase, run_suite, Phase, PhaseRecord};
pub use sources::{PowerSource, PowerSourceDescriptor, SourceKind};
pub use tracker::{start_tracking, EnergyReading, TrackerConfig, TrackingSession};

/// Version string recorded in report metadata.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
