//! Process-wide monotonic clock in seconds.
//!
//! All integration uses this clock. Wall-clock time only appears in report
//! metadata.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

static EPOCH: OnceLock<Instant> = OnceLock::new();
static LAST_NS: AtomicU64 = AtomicU64::new(0);

/// Seconds since the first call in this process.
///
/// Successive calls return strictly increasing values, even when the
/// underlying clock has not ticked between them.
pub fn monotonic_now() -> f64 {
    let epoch = *EPOCH.get_or_init(Instant::now);
    let raw = epoch.elapsed().as_nanos() as u64;
    let mut prev = LAST_NS.load(Ordering::Relaxed);
    loop {
        let next = raw.max(prev + 1);
        match LAST_NS.compare_exchange_weak(prev, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return next as f64 * 1e-9,
            Err(actual) => prev = actual,
        }
    }
}

/// Current UTC time as RFC 3339 with millisecond precision.
pub fn wall_clock() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strictly_increasing() {
        let mut last = monotonic_now();
        for _ in 0..10_000 {
            let now = monotonic_now();
            assert!(now > last);
            last = now;
        }
    }
}
