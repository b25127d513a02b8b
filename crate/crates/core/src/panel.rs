//! Keyed daily count series on a shared calendar.
//!
//! A [`Panel`] holds one count vector per [`SeriesKey`], all aligned to the
//! same contiguous [`Calendar`]. Slicing and [`split`] never copy data from
//! outside the requested day range, which is what the backtest relies on to
//! keep future observations out of training.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REGION: &str = "all";

/// Categorical identity of one series.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub profession: String,
    pub module: String,
    pub region: String,
}

impl SeriesKey {
    pub fn new(profession: &str, module: &str, region: Option<&str>) -> Result<Self> {
        let region = region.filter(|r| !r.is_empty()).unwrap_or(DEFAULT_REGION);
        if profession.is_empty() || module.is_empty() {
            return Err(Error::Format(format!(
                "empty label in key ({profession:?}, {module:?}, {region:?})"
            )));
        }
        Ok(Self {
            profession: profession.to_string(),
            module: module.to_string(),
            region: region.to_string(),
        })
    }

    /// File-system friendly identifier, used for per-series output files.
    pub fn slug(&self) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                .collect()
        };
        format!(
            "{}__{}__{}",
            clean(&self.profession),
            clean(&self.module),
            clean(&self.region)
        )
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.profession, self.module, self.region)
    }
}

/// Contiguous daily grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub start: NaiveDate,
    pub length: usize,
}

impl Calendar {
    /// Calendar of `length` days from `start`. Zero-length calendars only
    /// arise from slicing (an empty validation tail, for instance).
    pub fn new(start: NaiveDate, length: usize) -> Self {
        Self { start, length }
    }

    pub fn date(&self, index: usize) -> NaiveDate {
        self.start + Duration::days(index as i64)
    }

    /// Last day of the calendar. Meaningless for empty calendars.
    pub fn end(&self) -> NaiveDate {
        self.date(self.length.saturating_sub(1))
    }

    /// Index of `date`, or `None` when it falls outside the grid.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start).num_days();
        (offset >= 0 && (offset as usize) < self.length).then_some(offset as usize)
    }

    /// Signed day offset from the calendar start; valid for any date.
    pub fn offset_of(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (0..self.length).map(|i| self.date(i))
    }
}

/// Calendar covering `start..=end`.
pub fn build_calendar(start: NaiveDate, end: NaiveDate) -> Result<Calendar> {
    if start > end {
        return Err(Error::Range(format!("calendar start {start} is after end {end}")));
    }
    Ok(Calendar::new(start, (end - start).num_days() as usize + 1))
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::Format(format!("bad ISO date {s:?}: {e}")))
}

/// Raw calendar fields of one day: day of month, day of week (Monday = 0),
/// month and year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarFields {
    pub day_of_month: u32,
    pub day_of_week: u32,
    pub month: u32,
    pub year: i32,
}

impl CalendarFields {
    pub fn of(date: NaiveDate) -> Self {
        Self {
            day_of_month: date.day(),
            day_of_week: date.weekday().num_days_from_monday(),
            month: date.month(),
            year: date.year(),
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [
            self.day_of_month as f64,
            self.day_of_week as f64,
            self.month as f64,
            self.year as f64,
        ]
    }
}

pub const COVARIATE_WIDTH: usize = 4;

/// Calendar covariates for a run of days, raw and min-max normalized.
///
/// The normalization bounds are fixed for day-of-month, weekday and month,
/// and taken from the owning calendar's first and last year for the year
/// column. Rows past the calendar end extrapolate, so their year column may
/// exceed 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub raw: Vec<CalendarFields>,
    pub normalized: Vec<[f64; COVARIATE_WIDTH]>,
    pub min: [f64; COVARIATE_WIDTH],
    pub max: [f64; COVARIATE_WIDTH],
}

impl CovariateMatrix {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn span(&self, col: usize) -> f64 {
        (self.max[col] - self.min[col]).max(1.0)
    }

    pub fn normalize(&self, col: usize, value: f64) -> f64 {
        (value - self.min[col]) / self.span(col)
    }

    pub fn denormalize(&self, col: usize, value: f64) -> f64 {
        value * self.span(col) + self.min[col]
    }
}

/// Covariates for calendar days `from..to`. `to` may run past the calendar
/// end; dates simply continue.
pub fn covariates_for(calendar: &Calendar, from: usize, to: usize) -> CovariateMatrix {
    covariates_from(calendar, calendar.date(from), to.saturating_sub(from))
}

/// Covariates for `len` days starting at `first`, normalized with the
/// bounds of `calendar`. `first` may lie outside the calendar.
pub fn covariates_from(calendar: &Calendar, first: NaiveDate, len: usize) -> CovariateMatrix {
    let first_year = calendar.start.year() as f64;
    let last_year = calendar.end().year() as f64;
    let min = [1.0, 0.0, 1.0, first_year];
    let max = [31.0, 6.0, 12.0, last_year];
    let mut out = CovariateMatrix {
        raw: Vec::with_capacity(len),
        normalized: Vec::with_capacity(len),
        min,
        max,
    };
    for day in 0..len {
        let fields = CalendarFields::of(first + Duration::days(day as i64));
        let raw = fields.as_array();
        let mut norm = [0.0; COVARIATE_WIDTH];
        for c in 0..COVARIATE_WIDTH {
            norm[c] = out.normalize(c, raw[c]);
        }
        out.raw.push(fields);
        out.normalized.push(norm);
    }
    out
}

/// Aligned daily counts for many keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    calendar: Calendar,
    series: BTreeMap<SeriesKey, Vec<u32>>,
}

impl Panel {
    pub fn new(calendar: Calendar, series: BTreeMap<SeriesKey, Vec<u32>>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Format("panel has no series".into()));
        }
        for (key, values) in &series {
            if values.len() != calendar.length {
                return Err(Error::Format(format!(
                    "series {key} has {} values, calendar has {} days",
                    values.len(),
                    calendar.length
                )));
            }
        }
        Ok(Self { calendar, series })
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SeriesKey> {
        self.series.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SeriesKey, &[u32])> {
        self.series.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn get(&self, key: &SeriesKey) -> Option<&[u32]> {
        self.series.get(key).map(Vec::as_slice)
    }

    pub fn values_f64(&self, key: &SeriesKey) -> Option<Vec<f64>> {
        self.get(key).map(|v| v.iter().map(|&x| x as f64).collect())
    }

    /// Days `from..to` of every series.
    pub fn slice(&self, from: usize, to: usize) -> Result<Panel> {
        if from > to || to > self.calendar.length {
            return Err(Error::Range(format!(
                "slice {from}..{to} outside calendar of {} days",
                self.calendar.length
            )));
        }
        let series = self
            .series
            .iter()
            .map(|(k, v)| (k.clone(), v[from..to].to_vec()))
            .collect();
        Ok(Panel {
            calendar: Calendar::new(self.calendar.date(from), to - from),
            series,
        })
    }

    /// Keep only the listed keys.
    pub fn select(&self, keys: &[SeriesKey]) -> Result<Panel> {
        let mut series = BTreeMap::new();
        for key in keys {
            let values = self
                .series
                .get(key)
                .ok_or_else(|| Error::Category(key.to_string()))?;
            series.insert(key.clone(), values.clone());
        }
        Panel::new(self.calendar, series)
    }

    /// Index of the first non-zero count, or the series length when all zero.
    pub fn first_active(&self, key: &SeriesKey) -> Option<usize> {
        self.get(key)
            .map(|v| v.iter().position(|&x| x > 0).unwrap_or(v.len()))
    }

    /// Stable content hash, used for report provenance.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.calendar.start.to_string().as_bytes());
        hasher.update((self.calendar.length as u64).to_le_bytes());
        for (key, values) in &self.series {
            hasher.update(key.to_string().as_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Read the `date,profession,module,region,count` format. Days absent
    /// from the file are zero; duplicate (day, key) rows are summed.
    pub fn read_csv<R: Read>(reader: R) -> Result<Panel> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["date", "profession", "module", "region", "count"];
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(Error::Format(format!(
                "panel header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows: Vec<(NaiveDate, SeriesKey, u32)> = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let at = |i: usize| record.get(i).unwrap_or("").trim();
            let date = parse_date(at(0))?;
            let key = SeriesKey::new(at(1), at(2), Some(at(3)))?;
            let count: u32 = at(4).parse().map_err(|_| {
                Error::Format(format!("line {}: count {:?} is not a non-negative integer", line + 2, at(4)))
            })?;
            rows.push((date, key, count));
        }
        let (Some(first), Some(last)) = (
            rows.iter().map(|r| r.0).min(),
            rows.iter().map(|r| r.0).max(),
        ) else {
            return Err(Error::Format("panel file has no rows".into()));
        };
        let calendar = build_calendar(first, last)?;
        let mut series: BTreeMap<SeriesKey, Vec<u32>> = BTreeMap::new();
        for (date, key, count) in rows {
            let idx = calendar.offset_of(date) as usize;
            series.entry(key).or_insert_with(|| vec![0; calendar.length])[idx] += count;
        }
        Panel::new(calendar, series)
    }

    /// Write every (day, key) row, gap-free, ordered by key then date.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["date", "profession", "module", "region", "count"])?;
        for (key, values) in &self.series {
            for (i, v) in values.iter().enumerate() {
                wtr.write_record([
                    self.calendar.date(i).to_string().as_str(),
                    &key.profession,
                    &key.module,
                    &key.region,
                    &v.to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Forecast origin and window lengths for one train/validation/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub origin: NaiveDate,
    pub horizon: usize,
    pub validation_tail: usize,
}

impl SplitSpec {
    pub fn new(origin: NaiveDate) -> Self {
        Self {
            origin,
            horizon: 30,
            validation_tail: 30,
        }
    }
}

/// Disjoint, ordered pieces of a panel around a forecast origin.
#[derive(Debug, Clone)]
pub struct PanelSplit {
    pub train: Panel,
    pub validation: Panel,
    pub test: Panel,
    /// Calendar index of the origin in the parent panel.
    pub origin_index: usize,
}

impl PanelSplit {
    /// Everything strictly before the origin: train followed by validation.
    pub fn history(&self) -> Panel {
        let mut series = BTreeMap::new();
        for (key, train) in self.train.iter() {
            let mut v = train.to_vec();
            v.extend_from_slice(self.validation.get(key).unwrap_or(&[]));
            series.insert(key.clone(), v);
        }
        Panel {
            calendar: Calendar::new(
                self.train.calendar.start,
                self.train.calendar.length + self.validation.calendar.length,
            ),
            series,
        }
    }
}

/// Split `panel` at `spec.origin`. The test slice is truncated at the end of
/// the data when the horizon runs past it.
pub fn split(panel: &Panel, spec: &SplitSpec) -> Result<PanelSplit> {
    let cal = panel.calendar();
    let origin = cal.offset_of(spec.origin);
    if origin <= spec.validation_tail as i64 {
        return Err(Error::History(format!(
            "origin {} leaves no training days before a {}-day validation tail",
            spec.origin, spec.validation_tail
        )));
    }
    if origin >= cal.length as i64 {
        return Err(Error::Range(format!(
            "origin {} is not inside the calendar {}..={}",
            spec.origin,
            cal.start,
            cal.end()
        )));
    }
    let origin = origin as usize;
    let train_end = origin - spec.validation_tail;
    let test_end = (origin + spec.horizon).min(cal.length);
    Ok(PanelSplit {
        train: panel.slice(0, train_end)?,
        validation: panel.slice(train_end, origin)?,
        test: panel.slice(origin, test_end)?,
        origin_index: origin,
    })
}
