//! Seasonal naïve benchmark.

use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;

/// Repeat the last observed season; for series shorter than one season,
/// forecast the mean. The 50% band comes from the in-sample seasonal
/// residuals `x_t − x_{t−season}`.
pub fn seasonal_naive(train: &[f64], season: usize, horizon: usize) -> Result<ForecastDistribution> {
    if train.is_empty() {
        return Err(Error::History("seasonal naïve needs at least one observation".into()));
    }
    if horizon == 0 || season == 0 {
        return Err(Error::Contract("horizon and season must be ≥ 1".into()));
    }
    let n = train.len();
    if n < season {
        let mean = train.iter().sum::<f64>() / n as f64;
        let residuals = train.iter().map(|x| x - mean).collect();
        return Ok(ForecastDistribution::with_residuals(vec![mean; horizon], residuals));
    }
    let last = &train[n - season..];
    let point = (0..horizon).map(|h| last[h % season]).collect();
    let residuals = train
        .iter()
        .zip(&train[season..])
        .map(|(prev, cur)| cur - prev)
        .collect();
    Ok(ForecastDistribution::with_residuals(point, residuals))
}
