//! Analytic power traces used as a deterministic backend.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PowerSample, PowerSource, PowerSourceDescriptor, Reading, SourceError, SourceKind};
use crate::clock::monotonic_now;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Constant { watts: f64 },
    Ramp { from_w: f64, to_w: f64 },
    Sinusoid { mean_w: f64, amplitude_w: f64, period_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTraceSpec {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimulatedTraceError {
    #[error("trace has no segments")]
    Empty,
    #[error("segment {index}: {reason}")]
    Segment { index: usize, reason: String },
    #[error("t = {t} s outside trace [0, {total}] s")]
    OutOfRange { t: f64, total: f64 },
}

impl SimulatedTraceSpec {
    pub fn constant(watts: f64, duration_s: f64) -> Self {
        Self {
            segments: vec![Segment {
                duration_s,
                shape: Shape::Constant { watts },
            }],
        }
    }

    pub fn validate(&self) -> Result<(), SimulatedTraceError> {
        if self.segments.is_empty() {
            return Err(SimulatedTraceError::Empty);
        }
        for (index, seg) in self.segments.iter().enumerate() {
            let bad = |reason: &str| SimulatedTraceError::Segment {
                index,
                reason: reason.to_owned(),
            };
            if !(seg.duration_s > 0.0 && seg.duration_s.is_finite()) {
                return Err(bad("duration must be positive"));
            }
            match seg.shape {
                Shape::Constant { watts } if !(watts >= 0.0) => return Err(bad("power must be nonnegative")),
                Shape::Ramp { from_w, to_w } if !(from_w >= 0.0 && to_w >= 0.0) => {
                    return Err(bad("ramp endpoints must be nonnegative"))
                }
                Shape::Sinusoid {
                    mean_w,
                    amplitude_w,
                    period_s,
                } => {
                    if !(period_s > 0.0) {
                        return Err(bad("sinusoid period must be positive"));
                    }
                    if !(amplitude_w >= 0.0 && amplitude_w <= mean_w) {
                        return Err(bad("sinusoid amplitude must lie in [0, mean]"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }
}

fn shape_at(shape: &Shape, duration_s: f64, tau: f64) -> f64 {
    match *shape {
        Shape::Constant { watts } => watts,
        Shape::Ramp { from_w, to_w } => from_w + (to_w - from_w) * (tau / duration_s),
        Shape::Sinusoid {
            mean_w,
            amplitude_w,
            period_s,
        } => (mean_w + amplitude_w * (TAU * tau / period_s).sin()).max(0.0),
    }
}

/// Power of `spec` at `t` seconds from its start.
///
/// A time exactly on a segment boundary belongs to the later segment, except
/// at the very end of the trace.
pub fn simulated_power_at(spec: &SimulatedTraceSpec, t: f64) -> Result<f64, SimulatedTraceError> {
    let total = spec.total_duration();
    if spec.segments.is_empty() {
        return Err(SimulatedTraceError::Empty);
    }
    if !(t >= 0.0 && t <= total) {
        return Err(SimulatedTraceError::OutOfRange { t, total });
    }
    let mut start = 0.0;
    let last = spec.segments.len() - 1;
    for (i, seg) in spec.segments.iter().enumerate() {
        let end = start + seg.duration_s;
        if t < end || i == last {
            let tau = (t - start).clamp(0.0, seg.duration_s);
            return Ok(shape_at(&seg.shape, seg.duration_s, tau));
        }
        start = end;
    }
    unreachable!("non-empty segment list")
}

/// Plays a [`SimulatedTraceSpec`] against the monotonic clock.
///
/// The trace starts at the first read and repeats cyclically once its end is
/// reached, so it can back phases of any length.
pub struct SimulatedSource {
    descriptor: PowerSourceDescriptor,
    spec: SimulatedTraceSpec,
    origin: Option<f64>,
}

impl SimulatedSource {
    pub fn new(index: usize, spec: SimulatedTraceSpec) -> Result<Self, SimulatedTraceError> {
        spec.validate()?;
        Ok(Self {
            descriptor: PowerSourceDescriptor {
                id: format!("sim:{index}"),
                kind: SourceKind::Simulated,
                label: format!("simulated-{index}"),
                max_energy_range_uj: None,
                parent: None,
                path: None,
            },
            spec,
            origin: None,
        })
    }

    pub fn spec(&self) -> &SimulatedTraceSpec {
        &self.spec
    }

    pub fn power_at_elapsed(&self, elapsed: f64) -> f64 {
        let total = self.spec.total_duration();
        let tau = if elapsed <= total { elapsed } else { elapsed % total };
        simulated_power_at(&self.spec, tau.max(0.0)).unwrap_or(0.0)
    }
}

impl PowerSource for SimulatedSource {
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(duration_s: f64, shape: Shape) -> SimulatedTraceSpec {
        SimulatedTraceSpec {
            segments: vec![Segment { duration_s, shape }],
        }
    }

    #[test]
    fn constant() {
        let s = SimulatedTraceSpec::constant(100.0, 10.0);
        for t in [0.0, 3.3, 10.0] {
            assert_eq!(simulated_power_at(&s, t).unwrap(), 100.0);
        }
    }

    #[test]
    fn ramp_midpoint() {
        let s = one(10.0, Shape::Ramp { from_w: 0.0, to_w: 100.0 });
        assert_eq!(simulated_power_at(&s, 5.0).unwrap(), 50.0);
    }

    #[test]
    fn sinusoid_peak() {
        let s = one(
            10.0,
            Shape::Sinusoid {
                mean_w: 50.0,
                amplitude_w: 50.0,
                period_s: 10.0,
            },
        );
        assert!((simulated_power_at(&s, 2.5).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn beyond_end() {
        let s = SimulatedTraceSpec::constant(1.0, 2.0);
        assert!(matches!(
            simulated_power_at(&s, 2.5),
            Err(SimulatedTraceError::OutOfRange { .. })
        ));
        assert!(simulated_power_at(&s, -0.1).is_err());
    }

    #[test]
    fn multi_segment_boundaries() {
        let s = SimulatedTraceSpec {
            segments: vec![
                Segment {
                    duration_s: 2.0,
                    shape: Shape::Constant { watts: 10.0 },
                },
                Segment {
                    duration_s: 2.0,
                    shape: Shape::Ramp { from_w: 20.0, to_w: 40.0 },
                },
            ],
        };
        assert_eq!(simulated_power_at(&s, 1.999).unwrap(), 10.0);
        assert_eq!(simulated_power_at(&s, 2.0).unwrap(), 20.0);
        assert_eq!(simulated_power_at(&s, 4.0).unwrap(), 40.0);
    }

    #[test]
    fn validation() {
        assert_eq!(SimulatedTraceSpec { segments: vec![] }.validate(), Err(SimulatedTraceError::Empty));
        assert!(SimulatedTraceSpec::constant(1.0, 0.0).validate().is_err());
        let bad = one(
            1.0,
            Shape::Sinusoid {
                mean_w: 10.0,
                amplitude_w: 11.0,
                period_s: 1.0,
            },
        );
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_shape() {
        let spec: SimulatedTraceSpec = toml::from_str(
            r#"
            [[segments]]
            duration_s = 5.0
            shape = "constant"
            watts = 80.0

            [[segments]]
            duration_s = 10.0
            shape = "sinusoid"
            mean_w = 50.0
            amplitude_w = 20.0
            period_s = 4.0
            "#,
        )
        .unwrap();
        assert_eq!(spec.segments.len(), 2);
        assert_eq!(spec.segments[0].shape, Shape::Constant { watts: 80.0 });
    }

    #[test]
    fn source_repeats_cyclically() {
        let src = SimulatedSource::new(0, one(10.0, Shape::Ramp { from_w: 0.0, to_w: 100.0 })).unwrap();
        assert!((src.power_at_elapsed(15.0) - 50.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn deterministic(mean in 0.0f64..500.0, frac in 0.0f64..1.0, period in 0.1f64..100.0, t in 0.0f64..50.0) {
            let s = one(50.0, Shape::Sinusoid { mean_w: mean, amplitude_w: mean * frac, period_s: period });
            let a = simulated_power_at(&s, t).unwrap();
            let b = simulated_power_at(&s, t).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a >= 0.0);
        }
    }
}
