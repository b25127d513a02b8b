//! Point-forecast error metrics and interval coverage.
//!
//! `None` marks an undefined metric (MASE with a constant seasonal history,
//! MAPE with all-zero actuals). Aggregation skips undefined entries.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::quantile_sorted;
use crate::panel::SeriesKey;

/// Weekly season used for MASE scaling on daily data.
pub const MASE_SEASON: usize = 7;

fn check_lengths(actual: &[f64], forecast: &[f64]) -> Result<()> {
    if actual.len() != forecast.len() {
        return Err(Error::Contract(format!(
            "actual has {} points, forecast has {}",
            actual.len(),
            forecast.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Contract("cannot score an empty forecast".into()));
    }
    Ok(())
}

fn mean_abs_error(actual: &[f64], forecast: &[f64]) -> f64 {
    actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| (a - f).abs())
        .sum::<f64>()
        / actual.len() as f64
}

/// Mean absolute error scaled by the in-sample seasonal-naïve MAE of
/// `history` at lag `season`.
pub fn mase(actual: &[f64], forecast: &[f64], history: &[f64], season: usize) -> Result<Option<f64>> {
    check_lengths(actual, forecast)?;
    if season == 0 || history.len() <= season {
        return Err(Error::History(format!(
            "MASE needs more than {season} history points, got {}",
            history.len()
        )));
    }
    let scale = history
        .iter()
        .zip(&history[season..])
        .map(|(a, b)| (b - a).abs())
        .sum::<f64>()
        / (history.len() - season) as f64;
    if scale == 0.0 {
        return Ok(None);
    }
    Ok(Some(mean_abs_error(actual, forecast) / scale))
}

/// Mean of |a − f| / |a| over points with a ≠ 0.
pub fn mape(actual: &[f64], forecast: &[f64]) -> Result<Option<f64>> {
    check_lengths(actual, forecast)?;
    let (sum, n) = actual
        .iter()
        .zip(forecast)
        .filter(|(a, _)| **a != 0.0)
        .fold((0.0, 0usize), |(s, n), (a, f)| (s + ((a - f) / a).abs(), n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// Mean of 2|a − f| / (|a| + |f|), bounded by 2; 0/0 terms count as 0.
pub fn smape(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_lengths(actual, forecast)?;
    let sum: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| {
            let denom = a.abs() + f.abs();
            if denom == 0.0 {
                0.0
            } else {
                2.0 * (a - f).abs() / denom
            }
        })
        .sum();
    Ok(sum / actual.len() as f64)
}

/// `(rmse, mse)`.
pub fn rmse_mse(actual: &[f64], forecast: &[f64]) -> Result<(f64, f64)> {
    check_lengths(actual, forecast)?;
    let mse = actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        / actual.len() as f64;
    Ok((mse.sqrt(), mse))
}

/// Fraction of actuals inside the closed band `[lower, upper]`.
pub fn coverage(actual: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_lengths(actual, lower)?;
    check_lengths(actual, upper)?;
    for (index, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
        if lo > hi {
            return Err(Error::QuantileOrder {
                index,
                lower: lo,
                upper: hi,
            });
        }
    }
    let inside = actual
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(a, (lo, hi))| *lo <= *a && *a <= *hi)
        .count();
    Ok(inside as f64 / actual.len() as f64)
}

/// Scores of one model's forecast for one series at one origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub key: SeriesKey,
    pub origin: NaiveDate,
    pub model: String,
    pub mase: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub rmse: Option<f64>,
    pub mse: Option<f64>,
    pub coverage_50: Option<f64>,
    /// Set when the record comes from a fallback or failed fit.
    pub flag: Option<String>,
}

impl MetricRecord {
    /// Score a forecast with its 50% band against the actuals.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        key: SeriesKey,
        origin: NaiveDate,
        model: &str,
        actual: &[f64],
        point: &[f64],
        q25: &[f64],
        q75: &[f64],
        history: &[f64],
        season: usize,
    ) -> Result<Self> {
        let (rmse, mse) = rmse_mse(actual, point)?;
        Ok(Self {
            key,
            origin,
            model: model.to_string(),
            mase: mase(actual, point, history, season)?,
            mape: mape(actual, point)?,
            smape: Some(smape(actual, point)?),
            rmse: Some(rmse),
            mse: Some(mse),
            coverage_50: Some(coverage(actual, q25, q75)?),
            flag: None,
        })
    }

    /// A record for a series the model could not forecast at all.
    pub fn failed(key: SeriesKey, origin: NaiveDate, model: &str, reason: String) -> Self {
        Self {
            key,
            origin,
            model: model.to_string(),
            mase: None,
            mape: None,
            smape: None,
            rmse: None,
            mse: None,
            coverage_50: None,
            flag: Some(reason),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.smape.is_none()
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Mase => self.mase,
            Metric::Mape => self.mape,
            Metric::Smape => self.smape,
            Metric::Rmse => self.rmse,
            Metric::Mse => self.mse,
            Metric::Coverage50 => self.coverage_50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mase,
    Mape,
    Smape,
    Rmse,
    Mse,
    #[serde(rename = "coverage_50")]
    Coverage50,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Mase,
        Metric::Mape,
        Metric::Smape,
        Metric::Rmse,
        Metric::Mse,
        Metric::Coverage50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mase => "mase",
            Metric::Mape => "mape",
            Metric::Smape => "smape",
            Metric::Rmse => "rmse",
            Metric::Mse => "mse",
            Metric::Coverage50 => "coverage_50",
        }
    }
}

/// Per-model means over all records, each metric skipping undefined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub records: usize,
    pub failures: usize,
    pub mase: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub rmse: Option<f64>,
    pub mse: Option<f64>,
    pub coverage_50: Option<f64>,
}

impl ModelSummary {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Mase => self.mase,
            Metric::Mape => self.mape,
            Metric::Smape => self.smape,
            Metric::Rmse => self.rmse,
            Metric::Mse => self.mse,
            Metric::Coverage50 => self.coverage_50,
        }
    }
}

/// Box-plot statistics of one metric for one (model, origin month).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthBox {
    pub model: String,
    pub month: String,
    pub metric: Metric,
    pub n: usize,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub summary: Vec<ModelSummary>,
    pub monthly: Vec<MonthBox>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Tukey box: quartiles plus whiskers at the most extreme points within
/// 1.5 IQR of the box.
fn tukey_box(mut values: Vec<f64>) -> Option<(f64, f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&values, 0.25);
    let med = quantile_sorted(&values, 0.5);
    let q3 = quantile_sorted(&values, 0.75);
    let fence = 1.5 * (q3 - q1);
    let lo = values.iter().copied().find(|&v| v >= q1 - fence).unwrap_or(q1);
    let hi = values.iter().rev().copied().find(|&v| v <= q3 + fence).unwrap_or(q3);
    Some((lo, q1, med, q3, hi))
}

/// Per-model means (Table-1 shape) and per-(model, month) MASE and MAPE
/// distributions. Models appear in first-seen order.
pub fn aggregate(records: &[MetricRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Contract("cannot aggregate zero records".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.model.as_str()) {
            order.push(&r.model);
        }
    }
    let summary = order
        .iter()
        .map(|&model| {
            let rs: Vec<&MetricRecord> = records.iter().filter(|r| r.model == model).collect();
            let m = |metric: Metric| mean_defined(rs.iter().map(|r| r.get(metric)));
            ModelSummary {
                model: model.to_string(),
                records: rs.len(),
                failures: rs.iter().filter(|r| r.is_failure()).count(),
                mase: m(Metric::Mase),
                mape: m(Metric::Mape),
                smape: m(Metric::Smape),
                rmse: m(Metric::Rmse),
                mse: m(Metric::Mse),
                coverage_50: m(Metric::Coverage50),
            }
        })
        .collect();

    let mut groups: BTreeMap<(usize, String, Metric), Vec<f64>> = BTreeMap::new();
    for r in records {
        let rank = order.iter().position(|m| *m == r.model).unwrap();
        let month = format!("{:04}-{:02}", r.origin.year(), r.origin.month());
        for metric in [Metric::Mase, Metric::Mape] {
            let entry = groups.entry((rank, month.clone(), metric)).or_default();
            if let Some(v) = r.get(metric) {
                entry.push(v);
            }
        }
    }
    let monthly = groups
        .into_iter()
        .filter_map(|((rank, month, metric), values)| {
            let n = values.len();
            tukey_box(values).map(|(whisker_low, q1, median, q3, whisker_high)| MonthBox {
                model: order[rank].to_string(),
                month,
                metric,
                n,
                whisker_low,
                q1,
                median,
                q3,
                whisker_high,
            })
        })
        .collect();
    Ok(Aggregate { summary, monthly })
}
