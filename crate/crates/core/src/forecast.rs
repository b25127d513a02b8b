//! Forecast distributions shared by every model.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Linear-interpolation quantile (Hyndman-Fan type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Where a forecast's uncertainty comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    /// Sample paths, `paths[s][h]`.
    Samples(Vec<Vec<f64>>),
    /// Gaussian with the given standard deviation per step.
    Gaussian(Vec<f64>),
    /// Point plus an empirical residual distribution (sorted), shared by all steps.
    Residuals(Vec<f64>),
}

/// Forecast of one series over `horizon` steps. All values live in the
/// count domain and are clamped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub point: Vec<f64>,
    pub spread: Spread,
}

impl ForecastDistribution {
    pub fn from_samples(paths: Vec<Vec<f64>>) -> Result<Self> {
        let horizon = paths.first().map(Vec::len).unwrap_or(0);
        if paths.is_empty() || paths.iter().any(|p| p.len() != horizon) {
            return Err(Error::Contract("sample paths must be non-empty and equal length".into()));
        }
        let mut fd = Self {
            point: vec![0.0; horizon],
            spread: Spread::Samples(paths),
        };
        fd.point = fd.quantile(0.5);
        Ok(fd)
    }

    pub fn gaussian(point: Vec<f64>, sd: Vec<f64>) -> Self {
        Self {
            point: point.into_iter().map(|x| x.max(0.0)).collect(),
            spread: Spread::Gaussian(sd),
        }
    }

    pub fn with_residuals(point: Vec<f64>, mut residuals: Vec<f64>) -> Self {
        residuals.retain(|r| r.is_finite());
        residuals.sort_by(f64::total_cmp);
        if residuals.is_empty() {
            residuals.push(0.0);
        }
        Self {
            point: point.into_iter().map(|x| x.max(0.0)).collect(),
            spread: Spread::Residuals(residuals),
        }
    }

    pub fn horizon(&self) -> usize {
        self.point.len()
    }

    pub fn samples(&self) -> Option<&[Vec<f64>]> {
        match &self.spread {
            Spread::Samples(p) => Some(p),
            _ => None,
        }
    }

    /// Per-step quantile `q`; monotone in `q` at every step.
    pub fn quantile(&self, q: f64) -> Vec<f64> {
        match &self.spread {
            Spread::Samples(paths) => {
                let mut col = vec![0.0; paths.len()];
                (0..self.horizon())
                    .map(|h| {
                        for (c, p) in col.iter_mut().zip(paths) {
                            *c = p[h];
                        }
                        col.sort_by(f64::total_cmp);
                        quantile_sorted(&col, q).max(0.0)
                    })
                    .collect()
            }
            Spread::Gaussian(sd) => {
                let z = if q == 0.5 { 0.0 } else { normal_quantile(q) };
                self.point
                    .iter()
                    .zip(sd)
                    .map(|(p, s)| (p + z * s).max(0.0))
                    .collect()
            }
            Spread::Residuals(res) => {
                let r = quantile_sorted(res, q);
                self.point.iter().map(|p| (p + r).max(0.0)).collect()
            }
        }
    }

    /// Lower and upper edges of the central 50% interval.
    pub fn band50(&self) -> (Vec<f64>, Vec<f64>) {
        (self.quantile(0.25), self.quantile(0.75))
    }
}
