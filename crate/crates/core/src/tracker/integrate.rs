use thiserror::Error;

use crate::sources::{counter_delta, EnergyCounterReading, PowerSample};

pub const DEFAULT_SHORT_RUN_THRESHOLD_S: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum IntegrationError {
    #[error("need at least 2 observations, got {0}")]
    InsufficientData(usize),
    #[error("timestamps not increasing at index {0}")]
    Unordered(usize),
    #[error("negative power {watts} W at index {index}")]
    NegativePower { index: usize, watts: f64 },
}

/// Trapezoidal integral of instantaneous power, in joules.
pub fn integrate_power_trace(samples: &[PowerSample]) -> Result<f64, IntegrationError> {
    if samples.len() < 2 {
        return Err(IntegrationError::InsufficientData(samples.len()));
    }
    let mut joules = 0.0;
    for (i, pair) in samples.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        if !(b.t > a.t) {
            return Err(IntegrationError::Unordered(i + 1));
        }
        if a.watts < 0.0 {
            return Err(IntegrationError::NegativePower { index: i, watts: a.watts });
        }
        joules += 0.5 * (a.watts + b.watts) * (b.t - a.t);
    }
    let last = samples[samples.len() - 1];
    if last.watts < 0.0 {
        return Err(IntegrationError::NegativePower {
            index: samples.len() - 1,
            watts: last.watts,
        });
    }
    Ok(joules)
}

/// Sum of wrap-corrected counter deltas, in microjoules.
pub fn accumulate_counter_trace_uj(
    readings: &[EnergyCounterReading],
    max_range_uj: u64,
) -> Result<u128, IntegrationError> {
    if readings.len() < 2 {
        return Err(IntegrationError::InsufficientData(readings.len()));
    }
    let mut total: u128 = 0;
    for (i, pair) in readings.windows(2).enumerate() {
        if pair[1].t < pair[0].t {
            return Err(IntegrationError::Unordered(i + 1));
        }
        total += u128::from(counter_delta(&pair[0], &pair[1], max_range_uj));
    }
    Ok(total)
}

/// Sum of wrap-corrected counter deltas, in joules.
pub fn accumulate_counter_trace(readings: &[EnergyCounterReading], max_range_uj: u64) -> Result<f64, IntegrationError> {
    accumulate_counter_trace_uj(readings, max_range_uj).map(|uj| uj as f64 / 1e6)
}

/// Runs shorter than `threshold_s` give unreliable estimates. A run of
/// exactly `threshold_s` passes.
pub fn short_run_warning(duration_s: f64, threshold_s: f64) -> Option<String> {
    (duration_s < threshold_s).then(|| {
        format!(
            "short run: {duration_s:.2} s is below the {threshold_s} s accuracy threshold; \
             energy estimates may be inaccurate (increase work_scale)"
        )
    })
}
