//! Automatic SARIMA order selection by AIC.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classical::sarima::{difference, fit_sarima_with, FitMethod, SarimaFit, SarimaOrder};
use crate::error::{Error, Result};

/// 5% critical value of the KPSS level-stationarity statistic.
const KPSS_CRITICAL: f64 = 0.463;
/// Seasonal differencing is applied above this seasonal strength.
const SEASONAL_STRENGTH_THRESHOLD: f64 = 0.64;
const MAX_STEPWISE_MODELS: usize = 94;
/// Series longer than this are searched with conditional-sum-of-squares
/// AIC and only the winners are refitted by exact likelihood.
const APPROXIMATE_ABOVE: usize = 150;
/// Exact refits attempted, best approximate AIC first.
const REFIT_CANDIDATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Stepwise,
    Exhaustive,
}

/// KPSS statistic for level stationarity with a Bartlett-kernel long-run
/// variance at lag `trunc(4·(n/100)^¼)`.
pub fn kpss_statistic(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let e: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let mut s = 0.0;
    let eta: f64 = e
        .iter()
        .map(|v| {
            s += v;
            s * s
        })
        .sum::<f64>()
        / (n * n) as f64;
    let lags = (4.0 * (n as f64 / 100.0).powf(0.25)) as usize;
    let mut lrv = e.iter().map(|v| v * v).sum::<f64>() / n as f64;
    for l in 1..=lags.min(n - 1) {
        let w = 1.0 - l as f64 / (lags as f64 + 1.0);
        let cov: f64 = (l..n).map(|t| e[t] * e[t - l]).sum::<f64>() / n as f64;
        lrv += 2.0 * w * cov;
    }
    if lrv <= 0.0 {
        return 0.0;
    }
    eta / lrv
}

/// Number of first differences (0..=2) until KPSS no longer rejects.
pub fn select_d(x: &[f64]) -> usize {
    let mut cur = x.to_vec();
    for d in 0..2 {
        if cur.len() < 10 || is_constant(&cur) || kpss_statistic(&cur) < KPSS_CRITICAL {
            return d;
        }
        cur = difference(&cur, 1, 0, 1).expect("length checked");
    }
    2
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// `1 − var(remainder) / var(detrended)` after a centered moving-average
/// trend and per-phase seasonal means; 0 when undefined.
pub fn seasonal_strength(x: &[f64], season: usize) -> f64 {
    if season < 2 || x.len() < 2 * season + 1 {
        return 0.0;
    }
    let half = season / 2;
    let even = season % 2 == 0;
    let mut detrended = Vec::new();
    let mut phase = Vec::new();
    for t in half..x.len() - half {
        let trend = if even {
            let inner: f64 = x[t + 1 - half..t + half].iter().sum();
            (inner + 0.5 * (x[t - half] + x[t + half])) / season as f64
        } else {
            x[t - half..=t + half].iter().sum::<f64>() / season as f64
        };
        detrended.push(x[t] - trend);
        phase.push(t % season);
    }
    let mut sums = vec![(0.0, 0usize); season];
    for (v, p) in detrended.iter().zip(&phase) {
        sums[*p].0 += v;
        sums[*p].1 += 1;
    }
    let means: Vec<f64> = sums.iter().map(|(s, c)| s / (*c).max(1) as f64).collect();
    let remainder: Vec<f64> = detrended.iter().zip(&phase).map(|(v, p)| v - means[*p]).collect();
    let vd = variance(&detrended);
    if vd <= 0.0 {
        return 0.0;
    }
    (1.0 - variance(&remainder) / vd).max(0.0)
}

/// Seasonal differencing order (0 or 1).
pub fn select_seasonal_d(x: &[f64], season: usize) -> usize {
    (season > 1 && seasonal_strength(x, season) > SEASONAL_STRENGTH_THRESHOLD) as usize
}

struct Search<'a> {
    series: &'a [f64],
    method: FitMethod,
    tried: BTreeMap<SarimaOrder, Option<f64>>,
    best: Option<SarimaFit>,
}

impl Search<'_> {
    fn try_order(&mut self, order: SarimaOrder) -> bool {
        if self.tried.contains_key(&order) || order.validate().is_err() {
            return false;
        }
        let fit = fit_sarima_with(self.series, &order, self.method);
        let aic = match &fit {
            Ok(f) => Some(f.aic),
            Err(e) => {
                log::trace!("order {order} skipped: {e}");
                None
            }
        };
        self.tried.insert(order, aic);
        match fit {
            Ok(f) if self.best.as_ref().is_none_or(|b| f.aic < b.aic) => {
                self.best = Some(f);
                true
            }
            _ => false,
        }
    }
}

fn neighbours(o: &SarimaOrder) -> Vec<SarimaOrder> {
    let mut out = Vec::new();
    let deltas: [(i32, i32, i32, i32); 12] = [
        (1, 0, 0, 0),
        (-1, 0, 0, 0),
        (0, 1, 0, 0),
        (0, -1, 0, 0),
        (1, 1, 0, 0),
        (-1, -1, 0, 0),
        (0, 0, 1, 0),
        (0, 0, -1, 0),
        (0, 0, 0, 1),
        (0, 0, 0, -1),
        (0, 0, 1, 1),
        (0, 0, -1, -1),
    ];
    for (dp, dq, dsp, dsq) in deltas {
        let shift = |v: usize, d: i32| -> Option<usize> { usize::try_from(v as i32 + d).ok() };
        let (Some(p), Some(q), Some(sp), Some(sq)) = (
            shift(o.p, dp),
            shift(o.q, dq),
            shift(o.seasonal_p, dsp),
            shift(o.seasonal_q, dsq),
        ) else {
            continue;
        };
        if let Ok(n) = SarimaOrder::new(p, o.d, q, sp, o.seasonal_d, sq, o.season) {
            out.push(n);
        }
    }
    out
}

/// Select the minimum-AIC SARIMA for `series` with season `season`.
///
/// Stepwise mode fixes d and D first and walks the neighbourhood of the
/// current best order. Exhaustive mode fits every order in the bounds,
/// including all differencing orders. Long series are searched with the
/// conditional-sum-of-squares AIC and the best few orders are refitted by
/// exact likelihood. The undifferenced white-noise model is always among the
/// final candidates.
pub fn auto_sarima(series: &[f64], season: usize, mode: SearchMode) -> Result<SarimaFit> {
    if season == 0 || series.len() < 3 * season.max(1) {
        return Err(Error::History(format!(
            "auto order selection needs at least {} points, got {}",
            3 * season.max(1),
            series.len()
        )));
    }
    let seasonal = season > 1;
    let approximate = series.len() > APPROXIMATE_ABOVE;
    let mut search = Search {
        series,
        method: if approximate { FitMethod::Css } else { FitMethod::CssMl },
        tried: BTreeMap::new(),
        best: None,
    };
    match mode {
        SearchMode::Stepwise => {
            let sd = select_seasonal_d(series, season);
            let base = if sd == 1 {
                difference(series, 0, 1, season)?
            } else {
                series.to_vec()
            };
            let d = select_d(&base);
            let s = |p, q, sp, sq| {
                SarimaOrder::new(p, d, q, if seasonal { sp } else { 0 }, sd, if seasonal { sq } else { 0 }, season)
            };
            let starts = [s(2, 2, 1, 1)?, s(0, 0, 0, 0)?, s(1, 0, 1, 0)?, s(0, 1, 0, 1)?];
            for o in starts {
                search.try_order(o);
            }
            loop {
                let Some(best) = search.best.as_ref().map(|b| b.order) else {
                    break;
                };
                let mut improved = false;
                for n in neighbours(&best) {
                    if search.tried.len() >= MAX_STEPWISE_MODELS {
                        break;
                    }
                    if search.try_order(n) {
                        improved = true;
                        break;
                    }
                }
                if !improved || search.tried.len() >= MAX_STEPWISE_MODELS {
                    break;
                }
            }
        }
        SearchMode::Exhaustive => {
            let seasonal_max = if seasonal { 2 } else { 0 };
            let sd_max = if seasonal { 1 } else { 0 };
            let mut grid = BTreeSet::new();
            for d in 0..=2 {
                for sd in 0..=sd_max {
                    for p in 0..=5 {
                        for q in 0..=5 {
                            for sp in 0..=seasonal_max {
                                for sq in 0..=seasonal_max {
                                    grid.insert(SarimaOrder::new(p, d, q, sp, sd, sq, season)?);
                                }
                            }
                        }
                    }
                }
            }
            for o in grid {
                search.try_order(o);
            }
        }
    }
    let mut best = if approximate {
        let mut ranked: Vec<(f64, SarimaOrder)> = search
            .tried
            .iter()
            .filter_map(|(o, aic)| aic.map(|a| (a, *o)))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        ranked
            .iter()
            .take(REFIT_CANDIDATES)
            .find_map(|(_, o)| fit_sarima_with(series, o, FitMethod::CssMl).ok())
    } else {
        search.best
    };
    let white_noise = SarimaOrder::new(0, 0, 0, 0, 0, 0, season)?;
    if best.as_ref().is_none_or(|b| b.order != white_noise) {
        if let Ok(wn) = fit_sarima_with(series, &white_noise, FitMethod::CssMl) {
            if best.as_ref().is_none_or(|b| wn.aic < b.aic) {
                best = Some(wn);
            }
        }
    }
    best.ok_or_else(|| Error::Convergence(format!("no SARIMA order could be fitted ({} tried)", search.tried.len())))
}

/// Size of the exhaustive grid for a seasonal series.
pub fn exhaustive_grid_size() -> usize {
    3 * 2 * 6 * 6 * 3 * 3
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn grid_has_1944_points() {
        assert_eq!(exhaustive_grid_size(), 1944);
    }

    #[test]
    fn kpss_separates_noise_from_walk() {
        let e = noise(1, 400);
        assert!(kpss_statistic(&e) < KPSS_CRITICAL);
        let mut walk = vec![0.0];
        for v in &e {
            walk.push(walk.last().unwrap() + v);
        }
        assert!(kpss_statistic(&walk) > KPSS_CRITICAL);
        assert_eq!(select_d(&e), 0);
        assert!(select_d(&walk) >= 1);
    }

    #[test]
    fn strong_weekly_pattern_is_seasonal() {
        let e = noise(2, 210);
        let x: Vec<f64> = (0..210)
            .map(|t| 10.0 + 5.0 * (2.0 * std::f64::consts::PI * t as f64 / 7.0).cos() + 0.3 * e[t])
            .collect();
        assert!(seasonal_strength(&x, 7) > 0.9);
        assert_eq!(select_seasonal_d(&x, 7), 1);
        assert_eq!(select_seasonal_d(&e, 7), 0);
    }

    #[test]
    fn white_noise_selects_near_trivial_model() {
        let x: Vec<f64> = noise(3, 300).iter().map(|v| v + 5.0).collect();
        let fit = auto_sarima(&x, 7, SearchMode::Stepwise).unwrap();
        let wn = crate::classical::sarima::fit_sarima(&x, &SarimaOrder::new(0, 0, 0, 0, 0, 0, 7).unwrap()).unwrap();
        assert!(fit.aic <= wn.aic);
        assert!(wn.aic - fit.aic <= 2.0 || fit.order == wn.order, "{} vs {}", fit.aic, wn.aic);
    }

    #[test]
    fn neighbours_stay_in_bounds() {
        let o = SarimaOrder::new(5, 1, 0, 2, 0, 0, 7).unwrap();
        for n in neighbours(&o) {
            assert!(n.p <= 5 && n.seasonal_p <= 2);
            assert_eq!((n.d, n.seasonal_d), (1, 0));
        }
    }

    #[test]
    fn too_short_is_history_error() {
        assert!(matches!(auto_sarima(&[1.0; 20], 7, SearchMode::Stepwise), Err(Error::History(_))));
    }
}
