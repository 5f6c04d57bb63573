//! Energy to kWh and CO2 conversion, repetition statistics, reports.
//!
//! Energies are carried in joules everywhere else in the crate and
//! converted here. Facility energy is node energy times the PUE; emissions
//! are facility kWh times the grid carbon intensity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod report;
pub mod stats;

pub use report::{build_report, emit_report, GroupSummary, Report, ReportFiles, ReportMetadata};
pub use stats::{summarize, SummaryStats};

pub const JOULES_PER_KWH: f64 = 3.6e6;
/// France's typical grid intensity, g CO2-eq per kWh.
pub const DEFAULT_CARBON_INTENSITY_G_PER_KWH: f64 = 55.0;
pub const DEFAULT_PUE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum AccountingError {
    #[error("PUE must be >= 1.0, got {0}")]
    BadPue(f64),
    #[error("carbon intensity must be >= 0, got {0}")]
    BadIntensity(f64),
    #[error("item count must be >= 1")]
    ZeroItems,
    #[error("cannot summarize an empty list")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    pub pue: f64,
    pub carbon_intensity_g_per_kwh: f64,
}

impl Default for EmissionParams {
    fn default() -> Self {
        Self {
            pue: DEFAULT_PUE,
            carbon_intensity_g_per_kwh: DEFAULT_CARBON_INTENSITY_G_PER_KWH,
        }
    }
}

impl EmissionParams {
    pub fn new(pue: f64, carbon_intensity_g_per_kwh: f64) -> Result<Self, AccountingError> {
        let p = Self {
            pue,
            carbon_intensity_g_per_kwh,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        if !(self.pue >= 1.0 && self.pue.is_finite()) {
            return Err(AccountingError::BadPue(self.pue));
        }
        if !(self.carbon_intensity_g_per_kwh >= 0.0 && self.carbon_intensity_g_per_kwh.is_finite()) {
            return Err(AccountingError::BadIntensity(self.carbon_intensity_g_per_kwh));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    /// Node energy.
    pub energy_kwh: f64,
    /// Node energy times PUE.
    pub adjusted_kwh: f64,
    pub co2_kg: f64,
}

pub fn joules_to_kwh(joules: f64) -> f64 {
    joules / JOULES_PER_KWH
}

pub fn compute_emissions(energy_kwh: f64, params: &EmissionParams) -> EmissionRecord {
    let adjusted_kwh = energy_kwh * params.pue;
    EmissionRecord {
        energy_kwh,
        adjusted_kwh,
        co2_kg: adjusted_kwh * params.carbon_intensity_g_per_kwh / 1000.0,
    }
}

pub fn per_item_energy(total_kwh: f64, item_count: u64) -> Result<f64, AccountingError> {
    if item_count == 0 {
        return Err(AccountingError::ZeroItems);
    }
    Ok(total_kwh / item_count as f64)
}
