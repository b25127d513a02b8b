//! Usage-log aggregation and synthetic panel generation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{build_calendar, parse_date, Calendar, CalendarFields, Panel, SeriesKey};
use crate::tensor::dist::neg_binomial_sample;

/// Share of unparseable log rows above which ingestion fails.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

/// One usage event from the app log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEvent {
    pub user_id: String,
    pub timestamp: DateTime<FixedOffset>,
    pub module: String,
    pub profession: String,
    pub region: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub rows: usize,
    pub skipped: usize,
    pub out_of_range: usize,
}

impl IngestStats {
    pub fn skip_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.skipped as f64 / self.rows as f64
        }
    }
}

/// Accepts RFC 3339 timestamps, naive `YYYY-MM-DD[T ]HH:MM:SS[.f]` (read as
/// UTC) and bare dates (midnight UTC).
pub fn parse_timestamp(s: &str) -> Option<DateTime<FixedOffset>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t);
    }
    let utc = FixedOffset::east_opt(0)?;
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(utc.from_utc_datetime(&t));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()))
}

/// Parse the `user_id,timestamp,module,profession,region` log format.
///
/// Malformed rows are logged with their line number and skipped. When more
/// than [`MAX_SKIP_FRACTION`] of the rows are skipped the whole read fails.
pub fn read_log_events<R: Read>(reader: R) -> Result<(Vec<LogEvent>, IngestStats)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["user_id", "timestamp", "module", "profession", "region"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Ingest(format!(
            "log header must be {}",
            expected.join(",")
        )));
    }
    let mut events = Vec::new();
    let mut stats = IngestStats::default();
    for (i, record) in rdr.records().enumerate() {
        stats.rows += 1;
        let line = i + 2;
        let parsed = record.ok().and_then(|r| {
            if r.len() != 5 {
                return None;
            }
            let f = |j: usize| r.get(j).map(str::trim).unwrap_or("");
            let timestamp = parse_timestamp(f(1))?;
            if f(0).is_empty() || f(2).is_empty() || f(3).is_empty() || f(4).is_empty() {
                return None;
            }
            Some(LogEvent {
                user_id: f(0).to_string(),
                timestamp,
                module: f(2).to_string(),
                profession: f(3).to_string(),
                region: f(4).to_string(),
            })
        });
        match parsed {
            Some(ev) => events.push(ev),
            None => {
                log::warn!("log line {line}: malformed row skipped");
                stats.skipped += 1;
            }
        }
    }
    if stats.skip_fraction() > MAX_SKIP_FRACTION {
        return Err(Error::Ingest(format!(
            "{} of {} rows malformed ({:.1}%), above the {:.0}% limit",
            stats.skipped,
            stats.rows,
            100.0 * stats.skip_fraction(),
            100.0 * MAX_SKIP_FRACTION
        )));
    }
    Ok((events, stats))
}

/// Calendar day of an event in the given fixed-offset timezone.
pub fn local_day(ts: &DateTime<FixedOffset>, tz: &FixedOffset) -> NaiveDate {
    ts.with_timezone(tz).date_naive()
}

/// Calendar spanning the local days of all events, if there are any.
pub fn calendar_of_events(events: &[LogEvent], tz: &FixedOffset) -> Option<Calendar> {
    let days = events.iter().map(|e| local_day(&e.timestamp, tz));
    let (min, max) = days.fold(None, |acc: Option<(NaiveDate, NaiveDate)>, d| match acc {
        None => Some((d, d)),
        Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
    })?;
    build_calendar(min, max).ok()
}

/// Count distinct users per (day, key).
///
/// A user's profession is pinned to the one on their earliest event. Events
/// outside the calendar are dropped and counted in `stats.out_of_range`.
/// `extra_keys` are included with all-zero series when absent from the log.
pub fn aggregate_logs(
    events: &[LogEvent],
    calendar: &Calendar,
    tz: &FixedOffset,
    extra_keys: &[SeriesKey],
    stats: &mut IngestStats,
) -> Result<Panel> {
    let mut first_seen: HashMap<&str, (&DateTime<FixedOffset>, &str)> = HashMap::new();
    for ev in events {
        let entry = first_seen
            .entry(ev.user_id.as_str())
            .or_insert((&ev.timestamp, ev.profession.as_str()));
        // Tie on timestamp resolves to the lexicographically smallest label
        // so the result is independent of event order.
        if (&ev.timestamp, ev.profession.as_str()) < (entry.0, entry.1) {
            *entry = (&ev.timestamp, ev.profession.as_str());
        }
    }

    let mut users: BTreeMap<SeriesKey, Vec<BTreeSet<&str>>> = BTreeMap::new();
    for key in extra_keys {
        users
            .entry(key.clone())
            .or_insert_with(|| vec![BTreeSet::new(); calendar.length]);
    }
    for ev in events {
        let day = local_day(&ev.timestamp, tz);
        let Some(idx) = calendar.index_of(day) else {
            stats.out_of_range += 1;
            continue;
        };
        let profession = first_seen[ev.user_id.as_str()].1;
        let key = SeriesKey::new(profession, &ev.module, Some(&ev.region))?;
        users
            .entry(key)
            .or_insert_with(|| vec![BTreeSet::new(); calendar.length])[idx]
            .insert(ev.user_id.as_str());
    }
    let series = users
        .into_iter()
        .map(|(k, days)| (k, days.iter().map(|s| s.len() as u32).collect()))
        .collect();
    Panel::new(*calendar, series)
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2019, 5, 1).unwrap()
}

/// Parameters of the synthetic count panel.
///
/// Each series draws `count_t ~ NB(mean λ_t, dispersion)` with
/// `λ_t = base_level · key_level · exp(trend·t + weekly_amplitude·w(dow) + shock_t + f_t)`
/// where `shock_t = ln(shock_multiplier)` from `shock_day` on, `key_level`
/// is a log-normal per-profession times per-module effect with log-sd
/// `key_level_spread`, and `f_t` is a shared AR(1) latent factor with
/// stationary sd `common_factor_sd`. Both extras vanish when set to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_professions: usize,
    pub n_modules: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub base_level: f64,
    pub trend_per_day: f64,
    pub weekly_amplitude: f64,
    pub shock_day: Option<usize>,
    pub shock_multiplier: f64,
    pub dispersion: f64,
    pub key_level_spread: f64,
    pub common_factor_sd: f64,
    pub common_factor_ar: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_professions: 5,
            n_modules: 10,
            days: 625,
            start_date: default_start(),
            base_level: 12.0,
            trend_per_day: 0.0012,
            weekly_amplitude: 0.35,
            shock_day: Some(320),
            shock_multiplier: 1.6,
            dispersion: 0.05,
            key_level_spread: 0.5,
            common_factor_sd: 0.0,
            common_factor_ar: 0.9,
            seed: 42,
        }
    }
}

const PROFESSIONS: [&str; 5] = ["midwife", "nurse", "other-sba", "physician", "student"];
const MODULES: [&str; 10] = [
    "third-stage-labour",
    "genital-mutilation",
    "hypertension",
    "infection-prevention",
    "placenta-removal",
    "maternal-sepsis",
    "neonatal-resuscitation",
    "newborn-management",
    "post-abortion-care",
    "post-partum-hemorrhage",
];

fn label(names: &[&str], prefix: &str, i: usize) -> String {
    names
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("{prefix}-{i}"))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.base_level,
            self.trend_per_day,
            self.weekly_amplitude,
            self.shock_multiplier,
            self.dispersion,
            self.key_level_spread,
            self.common_factor_sd,
            self.common_factor_ar,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("synth parameters must be finite".into()));
        }
        if self.n_professions == 0 || self.n_modules == 0 || self.days == 0 {
            return Err(Error::Config("synth needs ≥1 profession, module and day".into()));
        }
        if self.base_level <= 0.0 || self.shock_multiplier <= 0.0 || self.dispersion <= 0.0 {
            return Err(Error::Config(
                "base_level, shock_multiplier and dispersion must be > 0".into(),
            ));
        }
        if self.weekly_amplitude < 0.0 || self.key_level_spread < 0.0 || self.common_factor_sd < 0.0 {
            return Err(Error::Config("amplitudes and spreads must be ≥ 0".into()));
        }
        if self.common_factor_ar.abs() >= 1.0 {
            return Err(Error::Config("common_factor_ar must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Weekly profile, zero mean over the week, peak 1 on Mondays.
pub fn weekly_profile(day_of_week: u32) -> f64 {
    (2.0 * std::f64::consts::PI * day_of_week as f64 / 7.0).cos()
}

/// Deterministic synthetic panel.
pub fn synth_panel(spec: &SynthSpec) -> Result<Panel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let calendar = Calendar::new(spec.start_date, spec.days);

    let mut draw_effects = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                spec.key_level_spread * z
            })
            .collect()
    };
    let prof_effect = draw_effects(spec.n_professions);
    let module_effect = draw_effects(spec.n_modules);

    let factor: Vec<f64> = if spec.common_factor_sd > 0.0 {
        let innov_sd = spec.common_factor_sd * (1.0 - spec.common_factor_ar.powi(2)).sqrt();
        let mut f = spec.common_factor_sd * rng.sample::<f64, _>(StandardNormal);
        (0..spec.days)
            .map(|_| {
                let cur = f;
                f = spec.common_factor_ar * f + innov_sd * rng.sample::<f64, _>(StandardNormal);
                cur
            })
            .collect()
    } else {
        vec![0.0; spec.days]
    };
    let shock = spec.shock_multiplier.ln();
    let weekly: Vec<f64> = calendar
        .dates()
        .map(|d| spec.weekly_amplitude * weekly_profile(CalendarFields::of(d).day_of_week))
        .collect();

    let mut series = BTreeMap::new();
    for p in 0..spec.n_professions {
        for m in 0..spec.n_modules {
            let key = SeriesKey::new(
                &label(&PROFESSIONS, "profession", p),
                &label(&MODULES, "module", m),
                None,
            )?;
            let level = spec.base_level * (prof_effect[p] + module_effect[m]).exp();
            let values = (0..spec.days)
                .map(|t| {
                    let mut log_mean = spec.trend_per_day * t as f64 + weekly[t] + factor[t];
                    if spec.shock_day.is_some_and(|s| t >= s) {
                        log_mean += shock;
                    }
                    let mean = level * log_mean.exp();
                    neg_binomial_sample(&mut rng, mean, spec.dispersion) as u32
                })
                .collect();
            series.insert(key, values);
        }
    }
    Panel::new(calendar, series)
}

/// Events-to-panel convenience used by the CLI: derives the calendar from
/// the events when none is configured.
pub fn panel_from_events(
    events: &[LogEvent],
    calendar: Option<Calendar>,
    tz: &FixedOffset,
    extra_keys: &[SeriesKey],
    stats: &mut IngestStats,
) -> Result<Option<Panel>> {
    let Some(calendar) = calendar.or_else(|| calendar_of_events(events, tz)) else {
        return Ok(None);
    };
    if events.is_empty() && extra_keys.is_empty() {
        return Ok(None);
    }
    aggregate_logs(events, &calendar, tz, extra_keys, stats).map(Some)
}

pub fn utc() -> FixedOffset {
    FixedOffset::east_opt(0).unwrap()
}

/// Parse `+HH:MM` / `-HH:MM` / `Z` / `UTC` into a fixed offset.
pub fn parse_offset(s: &str) -> Result<FixedOffset> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("utc") || s == "Z" {
        return Ok(utc());
    }
    let (sign, rest) = match s.split_at_checked(1) {
        Some(("+", r)) => (1, r),
        Some(("-", r)) => (-1, r),
        _ => return Err(Error::Config(format!("bad timezone offset {s:?}"))),
    };
    let (h, m) = rest
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("bad timezone offset {s:?}")))?;
    let h: i32 = h.parse().map_err(|_| Error::Config(format!("bad offset {s:?}")))?;
    let m: i32 = m.parse().map_err(|_| Error::Config(format!("bad offset {s:?}")))?;
    FixedOffset::east_opt(sign * (h * 3600 + m * 60))
        .ok_or_else(|| Error::Config(format!("offset {s:?} out of range")))
}

/// Parse an ISO date used in configuration.
pub fn config_date(s: &str) -> Result<NaiveDate> {
    parse_date(s).map_err(|e| Error::Config(e.to_string()))
}
