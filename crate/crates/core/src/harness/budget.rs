//! Energy budget watchdog.
//!
//! The watchdog runs inside the sampler's tick hook. At the first tick where
//! the cumulative estimate (plus energy already spent earlier in the suite,
//! for suite-wide budgets) exceeds the limit it raises a [`StopSignal`]; the
//! running workload observes the signal and winds down.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::monotonic_now;
use crate::tracker::{EnergySnapshot, TickHook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetScope {
    PerPhase,
    PerSuite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBudget {
    pub limit_joules: f64,
    pub scope: BudgetScope,
}

#[derive(Debug, Error, PartialEq)]
#[error("budget limit must be positive, got {0} J")]
pub struct BadBudget(pub f64);

impl EnergyBudget {
    pub fn new(limit_joules: f64, scope: BudgetScope) -> Result<Self, BadBudget> {
        if !(limit_joules > 0.0 && limit_joules.is_finite()) {
            return Err(BadBudget(limit_joules));
        }
        Ok(Self { limit_joules, scope })
    }
}

/// The tick at which a budget fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetTrigger {
    pub snapshot: EnergySnapshot,
    /// Monotonic time the signal was raised.
    pub raised_at: f64,
}

/// One-shot stop flag shared between the watchdog and a workload.
#[derive(Debug, Default)]
pub struct StopSignal {
    raised: AtomicBool,
    trigger: Mutex<Option<BudgetTrigger>>,
    last: Mutex<Option<EnergySnapshot>>,
}

impl StopSignal {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn is_raised(&self) -> bool {
        self.raised.load(Ordering::Acquire)
    }

    /// Raise once; later calls are ignored.
    pub fn raise(&self, snapshot: EnergySnapshot) -> bool {
        let mut slot = self.trigger.lock().unwrap();
        if slot.is_some() {
            return false;
        }
        *slot = Some(BudgetTrigger {
            snapshot,
            raised_at: monotonic_now(),
        });
        self.raised.store(true, Ordering::Release);
        true
    }

    pub fn trigger(&self) -> Option<BudgetTrigger> {
        *self.trigger.lock().unwrap()
    }

    /// Most recent snapshot seen by the watchdog.
    pub fn last_snapshot(&self) -> Option<EnergySnapshot> {
        *self.last.lock().unwrap()
    }
}

pub fn exceeds(budget: &EnergyBudget, offset_joules: f64, snapshot: &EnergySnapshot) -> bool {
    offset_joules + snapshot.cumulative_joules > budget.limit_joules
}

/// First snapshot of a stream that exceeds the budget.
pub fn enforce_budget<I>(snapshots: I, budget: &EnergyBudget, offset_joules: f64) -> Option<EnergySnapshot>
where
    I: IntoIterator<Item = EnergySnapshot>,
{
    snapshots.into_iter().find(|s| exceeds(budget, offset_joules, s))
}

/// Tick hook raising `signal` the first time the budget is exceeded.
pub fn watchdog_hook(budget: EnergyBudget, offset_joules: f64, signal: Arc<StopSignal>) -> TickHook {
    Box::new(move |snapshot| {
        *signal.last.lock().unwrap() = Some(*snapshot);
        if !signal.is_raised() && exceeds(&budget, offset_joules, snapshot) {
            signal.raise(*snapshot);
        }
    })
}
