//! Playback of a recorded trace file as a live power source.
//!
//! Exact re-analysis of a recorded session goes through
//! [`crate::tracker::TrackingSession::from_trace`]; this source instead
//! replays the recorded power profile against the clock so a suite can run
//! on a captured power shape. Power logs are linearly interpolated; counter
//! logs become the piecewise-constant average power between readings. The
//! profile loops once its recorded span is exhausted.

use super::{PowerSample, PowerSource, PowerSourceDescriptor, Reading, SourceError, SourceKind};
use crate::clock::monotonic_now;
use crate::sources::counter_delta;
use crate::tracker::trace::{RecordedTrace, SourceLog};

#[derive(Debug, Clone)]
enum Profile {
    /// (elapsed, watts), linear between points
    Linear(Vec<(f64, f64)>),
    /// (segment start, watts) plus the span end
    Steps(Vec<(f64, f64)>, f64),
}

impl Profile {
    fn span(&self) -> f64 {
        match self {
            Profile::Linear(pts) => pts.last().map_or(0.0, |p| p.0),
            Profile::Steps(_, end) => *end,
        }
    }

    fn at(&self, tau: f64) -> f64 {
        match self {
            Profile::Linear(pts) => {
                let i = pts.partition_point(|p| p.0 <= tau);
                if i == 0 {
                    return pts[0].1;
                }
                if i == pts.len() {
                    return pts[pts.len() - 1].1;
                }
                let (t0, w0) = pts[i - 1];
                let (t1, w1) = pts[i];
                w0 + (w1 - w0) * (tau - t0) / (t1 - t0)
            }
            Profile::Steps(steps, _) => {
                let i = steps.partition_point(|s| s.0 <= tau);
                steps[i.saturating_sub(1)].1
            }
        }
    }
}

pub struct ReplaySource {
    descriptor: PowerSourceDescriptor,
    profile: Profile,
    origin: Option<f64>,
}

impl ReplaySource {
    /// Build a source replaying source `source_index` of `trace`.
    pub fn from_trace(index: usize, trace: &RecordedTrace, source_index: usize) -> Result<Self, SourceError> {
        let recorded = trace.header.sources.get(source_index).ok_or_else(|| SourceError::Invalid {
            id: format!("replay:{index}"),
            reason: format!("trace has no source #{source_index}"),
        })?;
        let invalid = |reason: &str| SourceError::Invalid {
            id: recorded.id.clone(),
            reason: reason.to_owned(),
        };
        let profile = match &trace.logs[source_index] {
            SourceLog::Power(samples) => {
                if samples.len() < 2 {
                    return Err(invalid("replay needs at least two samples"));
                }
                let t0 = samples[0].t;
                Profile::Linear(samples.iter().map(|s| (s.t - t0, s.watts)).collect())
            }
            SourceLog::Counter(readings) => {
                if readings.len() < 2 {
                    return Err(invalid("replay needs at least two readings"));
                }
                let max = recorded
                    .max_energy_range_uj
                    .ok_or_else(|| invalid("counter log without max_energy_range_uj"))?;
                let t0 = readings[0].t;
                let mut steps = Vec::with_capacity(readings.len() - 1);
                for pair in readings.windows(2) {
                    let dt = pair[1].t - pair[0].t;
                    if dt > 0.0 {
                        let joules = counter_delta(&pair[0], &pair[1], max) as f64 / 1e6;
                        steps.push((pair[0].t - t0, joules / dt));
                    }
                }
                if steps.is_empty() {
                    return Err(invalid("counter log has no positive time span"));
                }
                Profile::Steps(steps, readings[readings.len() - 1].t - t0)
            }
        };
        if !(profile.span() > 0.0) {
            return Err(invalid("recorded span is empty"));
        }
        Ok(Self {
            descriptor: PowerSourceDescriptor {
                id: format!("replay:{index}"),
                kind: SourceKind::Replay,
                label: format!("replay of {} ({})", recorded.id, trace.header.session),
                max_energy_range_uj: None,
                parent: None,
                path: None,
            },
            profile,
            origin: None,
        })
    }

    /// One source per top-level recorded source.
    pub fn all_from_trace(trace: &RecordedTrace) -> Result<Vec<Self>, SourceError> {
        trace
            .header
            .sources
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.is_subdomain())
            .enumerate()
            .map(|(n, (i, _))| Self::from_trace(n, trace, i))
            .collect()
    }

    pub fn power_at_elapsed(&self, elapsed: f64) -> f64 {
        let span = self.profile.span();
        let tau = if elapsed <= span { elapsed } else { elapsed % span };
        self.profile.at(tau.max(0.0))
    }
}

impl PowerSource for ReplaySource {
    fn descriptor(&self) -> &PowerSourceDescriptor {
        &self.descriptor
    }

    fn read(&mut self) -> Result<Reading, SourceError> {
        let t = monotonic_now();
        let origin = *self.origin.get_or_insert(t);
        Ok(Reading::Power(PowerSample {
            t,
            watts: self.power_at_elapsed(t - origin),
        }))
    }
}
