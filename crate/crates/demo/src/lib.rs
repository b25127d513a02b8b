//! WebAssembly bindings for the static demo page in `www/`.

use demandcast::classical::{auto_sarima, sarima_forecast, seasonal_naive, SearchMode};
use demandcast::ingest::{synth_panel, SynthSpec};
use demandcast::metrics::{coverage, mape, mase, rmse_mse, smape};
use demandcast::plot::{render_svg, ForecastSeries};
use demandcast::ForecastDistribution;
use wasm_bindgen::prelude::*;

const SEASON: usize = 7;

fn synth(seed: u64) -> Result<demandcast::Panel, String> {
    synth_panel(&SynthSpec { seed, ..SynthSpec::default() }).map_err(|e| e.to_string())
}

/// Labels of the synthetic series for `seed`, one per line.
pub fn series_labels(seed: u64) -> Result<String, String> {
    let panel = synth(seed)?;
    Ok(panel.keys().map(|k| k.to_string()).collect::<Vec<_>>().join("\n"))
}

/// Forecast one synthetic series from day `origin` with seasonal naive and
/// auto-SARIMA and draw both against the actuals.
pub fn forecast_chart(seed: u64, series: usize, origin: usize, horizon: usize) -> Result<String, String> {
    let panel = synth(seed)?;
    let key = panel.keys().nth(series).ok_or(format!("series index {series} is out of range"))?.clone();
    let values = panel.values_f64(&key).ok_or("missing series")?;
    if origin <= 2 * SEASON || origin + horizon > values.len() || horizon == 0 {
        return Err(format!(
            "origin and horizon must satisfy {} < origin and origin + horizon <= {}",
            2 * SEASON,
            values.len()
        ));
    }
    let (train, actual) = (&values[..origin], &values[origin..origin + horizon]);
    let start = panel.calendar().start + chrono_days(origin);
    let dates = (0..horizon).map(|i| start + chrono_days(i)).collect::<Vec<_>>();

    let naive = seasonal_naive(train, SEASON, horizon).map_err(|e| e.to_string())?;
    let fit = auto_sarima(train, SEASON, SearchMode::Stepwise).map_err(|e| e.to_string())?;
    let sarima = sarima_forecast(&fit, train, horizon).map_err(|e| e.to_string())?;
    let as_series = |model: &str, d: &ForecastDistribution| {
        let (q25, q75) = d.band50();
        ForecastSeries {
            model: model.to_string(),
            dates: dates.clone(),
            actual: actual.to_vec(),
            point: d.point.clone(),
            q25,
            q75,
        }
    };
    render_svg(
        &format!("{key} from {start}, SARIMA {}", fit.order),
        &[as_series("seasonal_naive", &naive), as_series("auto_sarima", &sarima)],
    )
    .map_err(|e| e.to_string())
}

fn chrono_days(n: usize) -> chrono::Duration {
    chrono::Duration::days(n as i64)
}

fn parse_list(name: &str, text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("{name}: '{s}' is not a number")))
        .collect()
}

/// Score a forecast. Lists are comma or whitespace separated; `lower` and
/// `upper` may be empty to skip coverage. Returns a JSON object.
pub fn score(actual: &str, forecast: &str, history: &str, lower: &str, upper: &str) -> Result<String, String> {
    let a = parse_list("actual", actual)?;
    let f = parse_list("forecast", forecast)?;
    let h = parse_list("history", history)?;
    let err = |e: demandcast::Error| e.to_string();
    let (rmse, mse) = rmse_mse(&a, &f).map_err(err)?;
    let mut out = serde_json::json!({
        "mase": mase(&a, &f, &h, SEASON).map_err(err)?,
        "mape": mape(&a, &f).map_err(err)?,
        "smape": smape(&a, &f).map_err(err)?,
        "rmse": rmse,
        "mse": mse,
    });
    let (lo, hi) = (parse_list("lower", lower)?, parse_list("upper", upper)?);
    if !lo.is_empty() || !hi.is_empty() {
        out["coverage_50"] = coverage(&a, &lo, &hi).map_err(err)?.into();
    }
    Ok(out.to_string())
}

#[wasm_bindgen(js_name = seriesLabels)]
pub fn series_labels_js(seed: u32) -> Result<String, JsError> {
    series_labels(seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = forecastChart)]
pub fn forecast_chart_js(seed: u32, series: u32, origin: u32, horizon: u32) -> Result<String, JsError> {
    forecast_chart(seed as u64, series as usize, origin as usize, horizon as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scoreForecast)]
pub fn score_js(actual: &str, forecast: &str, history: &str, lower: &str, upper: &str) -> Result<String, JsError> {
    score(actual, forecast, history, lower, upper).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_cover_the_default_panel() {
        let labels = series_labels(42).unwrap();
        assert_eq!(labels.lines().count(), 50);
    }

    #[test]
    fn chart_has_both_bands() {
        let svg = forecast_chart(42, 3, 400, 21).unwrap();
        assert!(svg.contains("data-model=\"seasonal_naive\"") && svg.contains("data-model=\"auto_sarima\""));
        assert!(forecast_chart(42, 99, 400, 21).is_err());
        assert!(forecast_chart(42, 0, 620, 30).is_err());
    }

    #[test]
    fn score_matches_hand_values() {
        let v: serde_json::Value =
            serde_json::from_str(&score("2 4", "3,4", "1 2 3 4 5 6 7 8", "1 4", "3 6").unwrap()).unwrap();
        assert_eq!(v["rmse"], (0.5f64).sqrt());
        assert_eq!(v["mase"], 0.5 / 7.0);
        assert_eq!(v["coverage_50"], 1.0);
        assert!(score("1 x", "1 2", "", "", "").unwrap_err().contains("'x'"));
    }
}
