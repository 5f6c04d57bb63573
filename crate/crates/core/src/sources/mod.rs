//! Power and energy observation channels.
//!
//! Two measurement shapes flow through the crate and are never mixed:
//! cumulative energy counters ([`EnergyCounterReading`], summed as deltas)
//! and instantaneous power ([`PowerSample`], integrated numerically).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod gpu;
pub mod powercap;
pub mod replay;
pub mod simulated;

pub use gpu::{discover_gpus, parse_gpu_query_output, poll_gpu_power, GpuPowerSource, GpuQuery};
pub use powercap::{discover_cpu_counters, read_counter, CpuCounterSource};
pub use replay::ReplaySource;
pub use simulated::{simulated_power_at, Segment, Shape, SimulatedSource, SimulatedTraceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    CpuCounter,
    GpuPower,
    Simulated,
    Replay,
}

impl SourceKind {
    /// Whether readings of this kind are cumulative counters rather than
    /// instantaneous power.
    pub fn is_cumulative(self) -> bool {
        matches!(self, SourceKind::CpuCounter)
    }
}

/// Identity and static properties of one observation channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSourceDescriptor {
    pub id: String,
    pub kind: SourceKind,
    pub label: String,
    /// Counter range in microjoules; present iff `kind` is `cpu-counter`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_energy_range_uj: Option<u64>,
    /// Id of the enclosing domain when this is a powercap subdomain.
    ///
    /// Subdomains are excluded from session totals so a package and its
    /// core/dram children are never counted twice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl PowerSourceDescriptor {
    pub fn is_subdomain(&self) -> bool {
        self.parent.is_some()
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        match (self.kind, self.max_energy_range_uj) {
            (SourceKind::CpuCounter, Some(r)) if r > 0 => Ok(()),
            (SourceKind::CpuCounter, _) => Err(SourceError::Invalid {
                id: self.id.clone(),
                reason: "cpu-counter source needs a positive max_energy_range_uj".into(),
            }),
            (_, Some(_)) => Err(SourceError::Invalid {
                id: self.id.clone(),
                reason: "max_energy_range_uj is only meaningful for cpu-counter sources".into(),
            }),
            (_, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t: f64,
    pub watts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCounterReading {
    pub t: f64,
    pub energy_uj: u64,
}

/// One observation from any source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reading {
    Power(PowerSample),
    Counter(EnergyCounterReading),
}

impl Reading {
    pub fn t(&self) -> f64 {
        match self {
            Reading::Power(s) => s.t,
            Reading::Counter(r) => r.t,
        }
    }
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("source {id}: cannot read {path}: {source}")]
    Read {
        id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("source {id}: cannot parse {raw:?}: {reason}")]
    Parse {
        id: String,
        raw: String,
        reason: String,
    },
    #[error("source {id}: counter value {value} outside [0, {max})")]
    OutOfRange { id: String, value: u64, max: u64 },
    #[error("gpu query `{command}` failed: {reason} (output: {raw:?})")]
    GpuQuery {
        command: String,
        reason: String,
        raw: String,
    },
    #[error("source {id}: {reason}")]
    Invalid { id: String, reason: String },
}

/// A channel the tracker can poll.
///
/// Implementations take their own monotonic timestamp at read time.
pub trait PowerSource: Send {
    fn descriptor(&self) -> &PowerSourceDescriptor;
    fn read(&mut self) -> Result<Reading, SourceError>;
}

/// Difference between two readings of a cumulative counter of range
/// `max_range_uj`, assuming at most one wrap between them.
pub fn counter_delta(prev: &EnergyCounterReading, curr: &EnergyCounterReading, max_range_uj: u64) -> u64 {
    if curr.energy_uj >= prev.energy_uj {
        curr.energy_uj - prev.energy_uj
    } else {
        (max_range_uj - prev.energy_uj) + curr.energy_uj
    }
}

/// The sampling interval is wrap-safe when a source drawing
/// `plausible_max_power_w` cannot traverse the whole counter range between
/// two reads.
pub fn check_wrap_safety(
    descriptor: &PowerSourceDescriptor,
    interval_s: f64,
    plausible_max_power_w: f64,
) -> Result<(), SourceError> {
    let Some(range) = descriptor.max_energy_range_uj else {
        return Ok(());
    };
    let worst_uj = interval_s * plausible_max_power_w * 1e6;
    if worst_uj < range as f64 {
        Ok(())
    } else {
        Err(SourceError::Invalid {
            id: descriptor.id.clone(),
            reason: format!(
                "interval {interval_s} s at {plausible_max_power_w} W may pass {worst_uj:.0} uJ, \
                 not below counter range {range} uJ"
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(e: u64) -> EnergyCounterReading {
        EnergyCounterReading { t: 0.0, energy_uj: e }
    }

    #[test]
    fn delta_forward() {
        assert_eq!(counter_delta(&r(5), &r(12), 1000), 7);
    }

    #[test]
    fn delta_identity() {
        assert_eq!(counter_delta(&r(321), &r(321), 1000), 0);
    }

    #[test]
    fn delta_wraparound() {
        assert_eq!(counter_delta(&r(900), &r(50), 1000), 150);
    }

    #[test]
    fn wrap_safety() {
        let mut d = PowerSourceDescriptor {
            id: "intel-rapl:0".into(),
            kind: SourceKind::CpuCounter,
            label: "package-0".into(),
            max_energy_range_uj: Some(262_143_328_850),
            parent: None,
            path: None,
        };
        assert!(check_wrap_safety(&d, 1.0, 1000.0).is_ok());
        d.max_energy_range_uj = Some(1_000_000);
        assert!(check_wrap_safety(&d, 1.0, 1000.0).is_err());
    }

    #[test]
    fn descriptor_validation() {
        let mut d = PowerSourceDescriptor {
            id: "x".into(),
            kind: SourceKind::CpuCounter,
            label: "x".into(),
            max_energy_range_uj: None,
            parent: None,
            path: None,
        };
        assert!(d.validate().is_err());
        d.max_energy_range_uj = Some(0);
        assert!(d.validate().is_err());
        d.max_energy_range_uj = Some(10);
        assert!(d.validate().is_ok());
        d.kind = SourceKind::Simulated;
        assert!(d.validate().is_err());
    }

    proptest! {
        #[test]
        fn delta_identity_any(range in 1u64..u64::MAX / 2, frac in 0.0f64..1.0) {
            let a = ((range as f64 * frac) as u64).min(range - 1);
            prop_assert_eq!(counter_delta(&r(a), &r(a), range), 0);
        }

        #[test]
        fn delta_in_range(range in 2u64..1_000_000_000, a in 0u64..1_000_000_000, b in 0u64..1_000_000_000) {
            let (a, b) = (a % range, b % range);
            let d = counter_delta(&r(a), &r(b), range);
            prop_assert!(d < range);
        }
    }
}
