//! Rolling-origin evaluation of every configured model over every series.
//!
//! Origins are processed in order. At each origin the panel is split into
//! train, validation and test slices; global networks are trained once on
//! all series jointly, classical models are fitted per series, and every
//! 30-day forecast is scored against the held-out month.

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::{auto_sarima, sarima_forecast, seasonal_naive, SearchMode};
use crate::deep::{
    fit_deepar, fit_embed_nn, fit_gp_copula, forecast_deepar, forecast_gp_copula, panel_series,
    predict_embed_nn, DeepArConfig, EmbedNnConfig, GlobalModel, GpCopulaConfig,
};
use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;
use crate::metrics::{aggregate, Aggregate, Metric, MetricRecord};
use crate::panel::{hex_string, split, Calendar, Panel, SeriesKey, SplitSpec};
use crate::seed::derive_seed;

/// Every origin needs at least this many days of history before it.
pub const MIN_PRIOR_HISTORY: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SeasonalNaive,
    AutoSarima,
    EmbedNn,
    #[serde(rename = "deepar")]
    DeepAr,
    GpCopula,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::SeasonalNaive,
        ModelKind::AutoSarima,
        ModelKind::EmbedNn,
        ModelKind::DeepAr,
        ModelKind::GpCopula,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SeasonalNaive => "seasonal_naive",
            ModelKind::AutoSarima => "auto_sarima",
            ModelKind::EmbedNn => "embed_nn",
            ModelKind::DeepAr => "deepar",
            ModelKind::GpCopula => "gp_copula",
        }
    }

    /// Trained once per origin over all series rather than per series.
    pub fn is_global(self) -> bool {
        matches!(self, ModelKind::EmbedNn | ModelKind::DeepAr | ModelKind::GpCopula)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown model '{s}', expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarimaConfig {
    pub search: SearchMode,
}

/// Hyperparameters of every model family. The `seed` fields of the network
/// configs are replaced by seeds derived from the run seed during a backtest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigs {
    pub auto_sarima: SarimaConfig,
    pub embed_nn: EmbedNnConfig,
    pub deepar: DeepArConfig,
    pub gp_copula: GpCopulaConfig,
}

impl ModelConfigs {
    pub fn validate(&self) -> Result<()> {
        self.embed_nn.validate()?;
        self.deepar.validate()?;
        self.gp_copula.validate()
    }
}

/// First day of every month from `first` through `last` inclusive.
pub fn monthly_origins(first: NaiveDate, last: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = first;
    while d <= last {
        out.push(d);
        match d.checked_add_months(Months::new(1)) {
            Some(next) => d = next,
            None => break,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestPlan {
    pub origins: Vec<NaiveDate>,
    pub horizon: usize,
    pub validation_tail: usize,
    pub season: usize,
    pub models: Vec<ModelKind>,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        let ymd = |m| NaiveDate::from_ymd_opt(2020, m, 1).expect("valid date");
        Self {
            origins: monthly_origins(ymd(6), ymd(12)),
            horizon: 30,
            validation_tail: 30,
            season: 7,
            models: ModelKind::ALL.to_vec(),
        }
    }
}

impl BacktestPlan {
    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if self.origins.is_empty() {
            return Err(Error::Config("the plan has no origins".into()));
        }
        if let Some(w) = self.origins.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "origins must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        if self.horizon == 0 || self.season == 0 {
            return Err(Error::Config("horizon and season must be ≥ 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("the plan has no models".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(Error::Config(format!("model {m} is listed twice")));
            }
        }
        if panel.is_empty() {
            return Err(Error::History("the panel has no series".into()));
        }
        let cal = panel.calendar();
        let need = MIN_PRIOR_HISTORY.max(self.validation_tail + 1);
        for &origin in &self.origins {
            let offset = cal.offset_of(origin);
            if offset < need as i64 {
                return Err(Error::History(format!(
                    "origin {origin} has {} days of history, at least {need} are required",
                    offset.max(0)
                )));
            }
            if offset + self.horizon as i64 > cal.length as i64 {
                return Err(Error::Range(format!(
                    "origin {origin} plus a {}-day horizon runs past the last day {}",
                    self.horizon,
                    cal.end()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the serialized plan and model configs.
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of the panel up to the end of the last test window, which is
    /// all the backtest ever reads.
    pub panel_hash: String,
    /// Number of leakage assertions evaluated (all passed).
    pub leakage_checks: usize,
}

/// A model whose failure rate at one origin exceeded one half. It is not
/// run at later origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedModel {
    pub model: String,
    pub origin: NaiveDate,
    pub reason: String,
}

/// One forecast with its test window, kept for the per-series CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTrace {
    pub origin: NaiveDate,
    pub model: ModelKind,
    pub key: SeriesKey,
    pub actual: Vec<f64>,
    pub point: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub plan: BacktestPlan,
    pub provenance: Provenance,
    pub records: Vec<MetricRecord>,
    pub aggregate: Aggregate,
    pub aborted: Vec<AbortedModel>,
    #[serde(skip)]
    pub forecasts: Vec<ForecastTrace>,
}

impl BacktestReport {
    /// Model names in plan order, for callers that print or plot.
    pub fn models(&self) -> Vec<&'static str> {
        self.plan.models.iter().map(|m| m.name()).collect()
    }
}

/// Refuses any slice that reaches the forecast origin.
struct LeakageGuard {
    origin: NaiveDate,
    checks: usize,
}

impl LeakageGuard {
    fn check(&mut self, what: &str, cal: &Calendar) -> Result<()> {
        self.checks += 1;
        if cal.length > 0 && cal.end() >= self.origin {
            return Err(Error::Leakage(format!(
                "{what} ends on {} but the origin is {}",
                cal.end(),
                self.origin
            )));
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

/// Forecast for one series, plus an optional flag when it came from a
/// fallback. `Err` holds the reason no forecast could be made.
pub type Outcome = std::result::Result<(ForecastDistribution, Option<String>), String>;

fn map_series<T, F>(series: &[(SeriesKey, Vec<f64>)], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&SeriesKey, &[f64]) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        series.par_iter().map(|(k, v)| f(k, v)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        series.iter().map(|(k, v)| f(k, v)).collect()
    }
}

fn naive_fallback(history: &[f64], window: Window, flag: String) -> Outcome {
    seasonal_naive(history, window.season, window.horizon)
        .map(|f| (f, Some(flag)))
        .map_err(|e| e.to_string())
}

fn sarima_outcome(history: &[f64], window: Window, mode: SearchMode) -> Outcome {
    // Leading zeros before a series went live carry no dynamics.
    let start = history.iter().position(|&x| x != 0.0).unwrap_or(history.len());
    let active = &history[start..];
    let fitted = auto_sarima(active, window.season, mode).and_then(|fit| {
        let f = sarima_forecast(&fit, active, window.horizon)?;
        match f.point.iter().all(|x| x.is_finite()) {
            true => Ok(f),
            false => Err(Error::Numerics(format!("{} forecast is not finite", fit.order))),
        }
    });
    match fitted {
        Ok(f) => Ok((f, None)),
        Err(e) => naive_fallback(history, window, format!("auto_sarima failed ({e}); seasonal naive fallback")),
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    horizon: usize,
    season: usize,
}

/// Everything before one origin, ready to fit and forecast from.
struct OriginRun<'a> {
    origin: NaiveDate,
    train: &'a Panel,
    validation: &'a Panel,
    history: &'a Panel,
    series: &'a [(SeriesKey, Vec<f64>)],
    window: Window,
    configs: &'a ModelConfigs,
    seed: u64,
}

type RunResult = (Vec<Outcome>, Option<GlobalModel>);

impl OriginRun<'_> {
    fn seed_for(&self, model: ModelKind, stage: &str) -> u64 {
        derive_seed(self.seed, &format!("{}/{}/{stage}", self.origin, model.name()))
    }

    fn all_failed(&self, reason: String) -> RunResult {
        (self.series.iter().map(|_| Err(reason.clone())).collect(), None)
    }

    fn run(&self, model: ModelKind) -> RunResult {
        let window = self.window;
        match model {
            ModelKind::SeasonalNaive => {
                let out = map_series(self.series, |_, h| {
                    seasonal_naive(h, window.season, window.horizon)
                        .map(|f| (f, None))
                        .map_err(|e| e.to_string())
                });
                (out, None)
            }
            ModelKind::AutoSarima => {
                let mode = self.configs.auto_sarima.search;
                (map_series(self.series, |_, h| sarima_outcome(h, window, mode)), None)
            }
            ModelKind::EmbedNn => {
                let config = EmbedNnConfig {
                    seed: self.seed_for(model, "train"),
                    ..self.configs.embed_nn.clone()
                };
                let net = match fit_embed_nn(self.train, self.validation, &config) {
                    Ok(m) => m,
                    Err(e) => return self.all_failed(format!("training failed: {e}")),
                };
                let future = net.covariates(self.origin, window.horizon);
                let out = map_series(self.series, |k, _| {
                    predict_embed_nn(&net, k, &future)
                        .map(|f| (f, None))
                        .map_err(|e| e.to_string())
                });
                (out, Some(net))
            }
            ModelKind::DeepAr => {
                let config = DeepArConfig {
                    seed: self.seed_for(model, "train"),
                    ..self.configs.deepar.clone()
                };
                let net = match fit_deepar(self.train, self.validation, &config) {
                    Ok(m) => m,
                    Err(e) => return self.all_failed(format!("training failed: {e}")),
                };
                let base = self.seed_for(model, "sample");
                let start = self.history.calendar().start;
                let out = map_series(self.series, |k, h| {
                    let seed = derive_seed(base, &k.to_string());
                    forecast_deepar(&net, k, h, start, window.horizon, config.samples, seed)
                        .map(|f| (f, None))
                        .map_err(|e| e.to_string())
                });
                (out, Some(net))
            }
            ModelKind::GpCopula => {
                let config = GpCopulaConfig {
                    seed: self.seed_for(model, "train"),
                    ..self.configs.gp_copula.clone()
                };
                // No early stopping, so the whole history trains the copula.
                let net = match fit_gp_copula(self.history, &config) {
                    Ok(m) => m,
                    Err(e) => return self.all_failed(format!("training failed: {e}")),
                };
                let seed = self.seed_for(model, "sample");
                let mut joint = match forecast_gp_copula(&net, self.history, window.horizon, config.samples, seed) {
                    Ok(m) => m,
                    Err(e) => return self.all_failed(format!("forecast failed: {e}")),
                };
                let out = self
                    .series
                    .iter()
                    .map(|(k, h)| match joint.remove(k) {
                        Some(f) => Ok((f, None)),
                        None => {
                            let why = net
                                .dropped
                                .get(&k.to_string())
                                .cloned()
                                .unwrap_or_else(|| "not forecast".into());
                            naive_fallback(h, window, format!("gp_copula excluded series ({why}); seasonal naive fallback"))
                        }
                    })
                    .collect();
                (out, Some(net))
            }
        }
    }
}

/// Run `plan` over `panel`. Deterministic given all four arguments.
///
/// A model that fails on more than half the series at one origin is
/// recorded in [`BacktestReport::aborted`] and skipped afterwards; callers
/// decide whether that is fatal.
pub fn run_backtest(panel: &Panel, plan: &BacktestPlan, configs: &ModelConfigs, seed: u64) -> Result<BacktestReport> {
    plan.validate(panel)?;
    configs.validate()?;

    let last = *plan.origins.last().expect("validated non-empty");
    let read_until = panel.calendar().offset_of(last) as usize + plan.horizon;
    let config_hash = sha256_hex(&serde_json::to_vec(&(plan, configs))?);
    let panel_hash = panel.slice(0, read_until)?.content_hash();

    let mut records = Vec::new();
    let mut forecasts = Vec::new();
    let mut aborted: Vec<AbortedModel> = Vec::new();
    let mut checks = 0;

    for &origin in &plan.origins {
        let spec = SplitSpec {
            origin,
            horizon: plan.horizon,
            validation_tail: plan.validation_tail,
        };
        let parts = split(panel, &spec)?;
        let history = parts.history();
        let mut guard = LeakageGuard { origin, checks: 0 };
        guard.check("training slice", parts.train.calendar())?;
        guard.check("validation slice", parts.validation.calendar())?;
        guard.check("history", history.calendar())?;
        if parts.test.calendar().start != origin || parts.test.calendar().length != plan.horizon {
            return Err(Error::Contract(format!("test window at {origin} is misaligned")));
        }
        checks += guard.checks;

        let series = panel_series(&history);
        let run = OriginRun {
            origin,
            train: &parts.train,
            validation: &parts.validation,
            history: &history,
            series: &series,
            window: Window {
                horizon: plan.horizon,
                season: plan.season,
            },
            configs,
            seed,
        };
        for &model in &plan.models {
            if aborted.iter().any(|a| a.model == model.name()) {
                continue;
            }
            let started = std::time::Instant::now();
            let (outcomes, _) = run.run(model);
            log::info!("{origin} {model}: {} series in {:.1?}", series.len(), started.elapsed());

            let mut failures = 0;
            let mut first_reason = None;
            for ((key, hist), outcome) in series.iter().zip(outcomes) {
                let actual = parts.test.values_f64(key).expect("test slice has every key");
                let scored = outcome.and_then(|(f, flag)| {
                    let (q25, q75) = f.band50();
                    let mut r = MetricRecord::score(
                        key.clone(), origin, model.name(), &actual, &f.point, &q25, &q75, hist, plan.season,
                    )
                    .map_err(|e| e.to_string())?;
                    r.flag = flag;
                    Ok((r, f.point, q25, q75))
                });
                match scored {
                    Ok((r, point, q25, q75)) => {
                        if let Some(flag) = &r.flag {
                            log::warn!("{origin} {model} {key}: {flag}");
                        }
                        records.push(r);
                        forecasts.push(ForecastTrace {
                            origin,
                            model,
                            key: key.clone(),
                            actual,
                            point,
                            q25,
                            q75,
                        });
                    }
                    Err(reason) => {
                        failures += 1;
                        log::warn!("{origin} {model} {key}: {reason}");
                        first_reason.get_or_insert_with(|| reason.clone());
                        records.push(MetricRecord::failed(key.clone(), origin, model.name(), reason));
                    }
                }
            }
            if 2 * failures > series.len() {
                let reason = format!(
                    "{failures} of {} series failed; first error: {}",
                    series.len(),
                    first_reason.unwrap_or_default()
                );
                log::error!("{origin} {model} aborted: {reason}");
                aborted.push(AbortedModel {
                    model: model.name().to_string(),
                    origin,
                    reason,
                });
            }
        }
    }

    let aggregate = aggregate(&records)?;
    Ok(BacktestReport {
        plan: plan.clone(),
        provenance: Provenance {
            config_hash,
            seed,
            panel_hash,
            leakage_checks: checks,
        },
        records,
        aggregate,
        aborted,
        forecasts,
    })
}

/// Forecasts of one model for every series of a panel.
#[derive(Debug, Clone)]
pub struct ModelForecast {
    pub model: ModelKind,
    /// Series in key order with their outcome.
    pub outcomes: Vec<(SeriesKey, Outcome)>,
    /// The trained network, for global models that trained successfully.
    pub trained: Option<GlobalModel>,
}

/// Fit `models` on all of `history` and forecast `horizon` days past its
/// end. The last `validation_tail` days serve as the networks' validation
/// slice, exactly as at a backtest origin.
pub fn forecast_models(
    history: &Panel,
    models: &[ModelKind],
    configs: &ModelConfigs,
    horizon: usize,
    season: usize,
    validation_tail: usize,
    seed: u64,
) -> Result<Vec<ModelForecast>> {
    configs.validate()?;
    if horizon == 0 || season == 0 {
        return Err(Error::Config("horizon and season must be ≥ 1".into()));
    }
    let cal = history.calendar();
    if cal.length <= validation_tail {
        return Err(Error::History(format!(
            "{} days of history leave nothing before a {validation_tail}-day validation tail",
            cal.length
        )));
    }
    let origin = cal.end() + chrono::Duration::days(1);
    let train = history.slice(0, cal.length - validation_tail)?;
    let validation = history.slice(cal.length - validation_tail, cal.length)?;
    let series = panel_series(history);
    let run = OriginRun {
        origin,
        train: &train,
        validation: &validation,
        history,
        series: &series,
        window: Window { horizon, season },
        configs,
        seed,
    };
    Ok(models
        .iter()
        .map(|&model| {
            let (outcomes, trained) = run.run(model);
            ModelForecast {
                model,
                outcomes: series.iter().map(|(k, _)| k.clone()).zip(outcomes).collect(),
                trained,
            }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `report.csv`: one row per metric record.
pub fn write_records_csv<W: Write>(records: &[MetricRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["origin", "profession", "module", "region", "model"];
    header.extend(Metric::ALL.iter().map(|m| m.name()));
    header.push("flag");
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.origin.to_string(),
            r.key.profession.clone(),
            r.key.module.clone(),
            r.key.region.clone(),
            r.model.clone(),
        ];
        row.extend(Metric::ALL.iter().map(|&m| cell(r.get(m))));
        row.push(r.flag.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-series forecast file: `date,actual,point,q25,q75`.
pub fn write_forecast_csv<W: Write>(trace: &ForecastTrace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "actual", "point", "q25", "q75"])?;
    for (i, date) in trace.origin.iter_days().take(trace.point.len()).enumerate() {
        w.write_record([
            date.to_string(),
            trace.actual[i].to_string(),
            trace.point[i].to_string(),
            trace.q25[i].to_string(),
            trace.q75[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Forecast beyond the data: `date,point,q25,q75` from `first` on.
pub fn write_point_forecast_csv<W: Write>(first: NaiveDate, forecast: &ForecastDistribution, writer: W) -> Result<()> {
    let (q25, q75) = forecast.band50();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "point", "q25", "q75"])?;
    for (i, date) in first.iter_days().take(forecast.horizon()).enumerate() {
        w.write_record([
            date.to_string(),
            forecast.point[i].to_string(),
            q25[i].to_string(),
            q75[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic JSON rendering of the report.
pub fn report_json(report: &BacktestReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Write `report.json`, `report.csv` and
/// `forecasts/<origin>/<model>/<series>.csv` under `dir`.
pub fn write_report(report: &BacktestReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(report)?)?;
    let mut csv_out = BufWriter::new(File::create(dir.join("report.csv"))?);
    write_records_csv(&report.records, &mut csv_out)?;
    csv_out.flush()?;
    for t in &report.forecasts {
        let sub = dir.join("forecasts").join(t.origin.to_string()).join(t.model.name());
        fs::create_dir_all(&sub)?;
        let mut out = BufWriter::new(File::create(sub.join(format!("{}.csv", t.key.slug())))?);
        write_forecast_csv(t, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

/// Fixed-width table of per-model means, one row per model.
pub fn format_summary(aggregate: &Aggregate) -> String {
    let mut out = format!("{:<16}", "model");
    for m in Metric::ALL {
        let _ = write!(out, "{:>12}", m.name());
    }
    let _ = writeln!(out, "{:>10}", "failures");
    for s in &aggregate.summary {
        let _ = write!(out, "{:<16}", s.model);
        for m in Metric::ALL {
            match s.get(m) {
                Some(v) => {
                    let _ = write!(out, "{v:>12.4}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        let _ = writeln!(out, "{:>10}", s.failures);
    }
    out
}
