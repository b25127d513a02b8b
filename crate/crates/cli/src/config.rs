//! Run configuration: one TOML or JSON file, then command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use demandcast::backtest::{BacktestPlan, ModelConfigs, ModelKind};
use demandcast::classical::SearchMode;
use demandcast::ingest::SynthSpec;
use demandcast::metrics::Metric;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    pub ingest: IngestSection,
    pub synth: SynthSpec,
    pub backtest: BacktestPlan,
    pub models: ModelConfigs,
    pub forecast: ForecastSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            jobs: None,
            panel: None,
            ingest: IngestSection::default(),
            synth: SynthSpec::default(),
            backtest: BacktestPlan::default(),
            models: ModelConfigs::default(),
            forecast: ForecastSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub timezone: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<NaiveDate>,
    pub keys: Vec<String>,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            input: None,
            timezone: "UTC".into(),
            start: None,
            end: None,
            keys: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin: Option<NaiveDate>,
    pub horizon: usize,
    pub validation_tail: usize,
    pub season: usize,
    pub models: Vec<ModelKind>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            origin: None,
            horizon: 30,
            validation_tail: 30,
            season: 7,
            models: ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub metric: Metric,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            input: None,
            metric: Metric::Mase,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub models: Option<Vec<ModelKind>>,
    pub origins: Option<Vec<NaiveDate>>,
    pub horizon: Option<usize>,
    pub exhaustive_arima: bool,
}

impl RunConfig {
    /// Parse a `.json` file as JSON and anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("invalid configuration in {}", path.display()))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(j) = o.jobs {
            self.jobs = Some(j);
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(models) = &o.models {
            self.backtest.models = models.clone();
            self.forecast.models = models.clone();
        }
        if let Some(origins) = &o.origins {
            self.backtest.origins = origins.clone();
        }
        if let Some(h) = o.horizon {
            self.backtest.horizon = h;
            self.forecast.horizon = h;
        }
        if o.exhaustive_arima {
            self.models.auto_sarima.search = SearchMode::Exhaustive;
        }
    }

    fn check(&self) -> Result<()> {
        if self.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        self.synth.validate()?;
        self.models.validate()?;
        if self.forecast.models.is_empty() {
            bail!("forecast.models is empty");
        }
        Ok(())
    }

    /// Panel CSV read by `backtest`/`forecast` and written by `ingest`/`synth`.
    pub fn panel_path(&self) -> PathBuf {
        self.panel.clone().unwrap_or_else(|| self.out.join("panel.csv"))
    }
}

/// Every configuration key with a one-line description. Defaults are read
/// from [`RunConfig::default`] when the help text is rendered.
const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed; every model seed is derived from it (--seed also sets synth.seed)"),
    ("out", "output directory (--out)"),
    ("jobs", "worker threads for per-series fits (--jobs; default: available cores)"),
    ("panel", "panel CSV path (default: <out>/panel.csv)"),
    ("ingest.input", "usage log CSV, gzip accepted by .gz extension"),
    ("ingest.timezone", "offset such as +05:30 used to assign events to days"),
    ("ingest.start", "first calendar day (default: earliest event)"),
    ("ingest.end", "last calendar day (default: latest event)"),
    ("ingest.keys", "extra profession/module[/region] series kept even without events"),
    ("synth.n_professions", "number of professions"),
    ("synth.n_modules", "number of modules"),
    ("synth.days", "calendar length"),
    ("synth.start_date", "first day"),
    ("synth.base_level", "mean daily count before key effects"),
    ("synth.trend_per_day", "log-linear trend per day"),
    ("synth.weekly_amplitude", "log amplitude of the weekly cycle"),
    ("synth.shock_day", "day index of a level shift"),
    ("synth.shock_multiplier", "level multiplier from the shock day on"),
    ("synth.dispersion", "negative binomial dispersion"),
    ("synth.key_level_spread", "log-sd of per-profession and per-module levels"),
    ("synth.common_factor_sd", "sd of the shared AR(1) log factor (0 disables)"),
    ("synth.common_factor_ar", "autocorrelation of the shared factor"),
    ("synth.seed", "generator seed"),
    ("backtest.origins", "forecast origins (--origins)"),
    ("backtest.horizon", "days forecast from each origin (--horizon)"),
    ("backtest.validation_tail", "days before each origin held out for early stopping"),
    ("backtest.season", "seasonal period for naive, SARIMA and the MASE scale"),
    ("backtest.models", "models to evaluate (--models)"),
    ("models.auto_sarima.search", "stepwise or exhaustive order search (--exhaustive-arima)"),
    ("models.embed_nn.hidden", "widths of the ReLU and sigmoid layers"),
    ("models.embed_nn.epochs", "training epochs"),
    ("models.embed_nn.batch_size", "rows per gradient step"),
    ("models.embed_nn.learning_rate", "Adam step size"),
    ("models.embed_nn.seed", "initialization seed outside backtests"),
    ("models.deepar.hidden", "LSTM cells per layer"),
    ("models.deepar.layers", "stacked LSTM layers"),
    ("models.deepar.dropout", "dropout rate between layers"),
    ("models.deepar.epochs", "training epochs"),
    ("models.deepar.batch_size", "windows per gradient step"),
    ("models.deepar.batches_per_epoch", "gradient steps per epoch"),
    ("models.deepar.context", "conditioning days before each training window's horizon"),
    ("models.deepar.horizon", "predicted days per training window"),
    ("models.deepar.samples", "sample paths per forecast"),
    ("models.deepar.learning_rate", "Adam step size"),
    ("models.deepar.clip_norm", "gradient norm clip"),
    ("models.deepar.seed", "initialization seed outside backtests"),
    ("models.gp_copula.hidden", "LSTM cells per layer"),
    ("models.gp_copula.layers", "stacked LSTM layers"),
    ("models.gp_copula.dropout", "dropout rate between layers"),
    ("models.gp_copula.epochs", "training epochs"),
    ("models.gp_copula.batches_per_epoch", "gradient steps per epoch"),
    ("models.gp_copula.series_batch", "series per training block"),
    ("models.gp_copula.context", "conditioning days per window"),
    ("models.gp_copula.horizon", "predicted days per training window"),
    ("models.gp_copula.samples", "joint sample paths per forecast"),
    ("models.gp_copula.rank", "rank of the covariance factor"),
    ("models.gp_copula.learning_rate", "Adam step size"),
    ("models.gp_copula.clip_norm", "gradient norm clip"),
    ("models.gp_copula.seed", "initialization seed outside backtests"),
    ("forecast.origin", "first forecast day; data from it on is ignored (default: day after the panel)"),
    ("forecast.horizon", "days to forecast (--horizon)"),
    ("forecast.validation_tail", "days held out for early stopping"),
    ("forecast.season", "seasonal period"),
    ("forecast.models", "models to run (--models)"),
    ("report.input", "report.json to summarize (default: <out>/report.json)"),
    ("report.metric", "metric of the per-month table"),
];

fn default_of(value: &serde_json::Value, dotted: &str) -> String {
    let mut v = value;
    for part in dotted.split('.') {
        match v.get(part) {
            Some(next) => v = next,
            None => return "unset".into(),
        }
    }
    match v {
        serde_json::Value::Array(items) if items.iter().all(|i| i.is_string()) => {
            let names: Vec<_> = items.iter().filter_map(|i| i.as_str()).collect();
            if names.is_empty() {
                "[]".into()
            } else {
                names.join(",")
            }
        }
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Configuration reference appended to `--help`.
pub fn help_text() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut out = String::from(
        "Configuration (--config PATH, TOML or .json; flags override the file; unknown keys are errors).\n\
         Keys and defaults:\n",
    );
    let mut section = "";
    for (key, doc) in KEYS {
        let head = key.rsplit_once('.').map(|(s, _)| s).unwrap_or("");
        if head != section {
            let _ = writeln!(out, "  [{head}]");
            section = head;
        }
        let _ = writeln!(out, "    {key} = {}  {doc}", default_of(&defaults, key));
    }
    out.push_str("\nLog verbosity: DEMANDCAST_LOG=error|warn|info|debug|trace (default warn).\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        match v.as_object() {
            Some(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaves(child, &path, out);
                }
            }
            None => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn every_key_is_documented() {
        let mut cfg = RunConfig::default();
        // Optional keys only serialize when set.
        cfg.jobs = Some(1);
        cfg.panel = Some("p".into());
        cfg.ingest.input = Some("i".into());
        cfg.ingest.start = NaiveDate::from_ymd_opt(2020, 1, 1);
        cfg.ingest.end = cfg.ingest.start;
        cfg.forecast.origin = cfg.ingest.start;
        cfg.report.input = Some("r".into());
        let mut found = Vec::new();
        leaves(&serde_json::to_value(&cfg).unwrap(), "", &mut found);
        let documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        for key in &found {
            assert!(documented.contains(&key.as_str()), "undocumented key {key}");
        }
        assert_eq!(found.len(), documented.len());
    }

    #[test]
    fn help_shows_defaults() {
        let h = help_text();
        assert!(h.contains("models.deepar.epochs = 300"));
        assert!(h.contains("backtest.origins = 2020-06-01,2020-07-01"));
        assert!(h.contains("models.embed_nn.hidden = [1000,500]"));
        assert!(h.contains("report.input = unset"));
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 7\n[models.deepar]\nepochs = 3\n[backtest]\nmodels = [\"deepar\"]\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"seed": 7, "models": {"deepar": {"epochs": 3}}, "backtest": {"models": ["deepar"]}}"#).unwrap();
        let a = RunConfig::from_file(&t).unwrap();
        assert_eq!(a, RunConfig::from_file(&j).unwrap());
        assert_eq!(a.models.deepar.epochs, 3);
        assert_eq!(a.models.deepar.hidden, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[models.deepar]\nepoch = 3\n").unwrap();
        assert!(RunConfig::from_file(&t).is_err());
    }

    #[test]
    fn flags_win() {
        let o = Overrides {
            seed: Some(5),
            horizon: Some(10),
            models: Some(vec![ModelKind::SeasonalNaive]),
            exhaustive_arima: true,
            ..Default::default()
        };
        let c = RunConfig::load(None, &o).unwrap();
        assert_eq!((c.seed, c.synth.seed), (5, 5));
        assert_eq!((c.backtest.horizon, c.forecast.horizon), (10, 10));
        assert_eq!(c.backtest.models, vec![ModelKind::SeasonalNaive]);
        assert_eq!(c.models.auto_sarima.search, SearchMode::Exhaustive);
    }
}
