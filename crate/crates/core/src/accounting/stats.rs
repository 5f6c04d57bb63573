use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::AccountingError;

/// Central tendency and spread over repetitions.
///
/// `std` is the sample standard deviation and `ci95_half_width` the
/// Student-t 95% interval half-width; both are absent for a single value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci95_half_width: Option<f64>,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn ci_bounds(&self) -> (f64, f64) {
        let h = self.ci95_half_width.unwrap_or(0.0);
        (self.mean - h, self.mean + h)
    }
}

/// Two-sided 95% Student-t quantile for `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df >= 1")
        .inverse_cdf(0.975)
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats, AccountingError> {
    if values.is_empty() {
        return Err(AccountingError::Empty);
    }
    // sorted summation makes the result independent of input order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let (min, max) = (sorted[0], sorted[n - 1]);
    let mean = mean.clamp(min, max);
    if n == 1 {
        return Ok(SummaryStats {
            n,
            mean,
            std: None,
            ci95_half_width: None,
            min,
            max,
        });
    }
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(SummaryStats {
        n,
        mean,
        std: Some(std),
        ci95_half_width: Some(t_quantile_975(n - 1) * std / (n as f64).sqrt()),
        min,
        max,
    })
}
