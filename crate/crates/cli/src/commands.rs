use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use demandcast::backtest::{
    format_summary, forecast_models, run_backtest, write_point_forecast_csv, write_report, BacktestReport,
};
use demandcast::ingest::{parse_offset, panel_from_events, read_log_events, synth_panel};
use demandcast::metrics::aggregate;
use demandcast::panel::{build_calendar, Calendar};
use demandcast::plot::plot_forecast_dir;
use demandcast::{Panel, SeriesKey};
use flate2::read::GzDecoder;

use crate::config::RunConfig;

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn read_panel(path: &Path) -> Result<Panel> {
    Panel::read_csv(open_maybe_gz(path)?).with_context(|| format!("reading panel {}", path.display()))
}

fn write_panel(panel: &Panel, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    panel.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_key(s: &str) -> Result<SeriesKey> {
    let parts: Vec<&str> = s.split('/').collect();
    let key = match parts.as_slice() {
        [p, m] => SeriesKey::new(p, m, None),
        [p, m, r] => SeriesKey::new(p, m, Some(r)),
        _ => bail!("series key '{s}' is not profession/module[/region]"),
    };
    Ok(key?)
}

pub fn ingest(cfg: &RunConfig, log: Option<&Path>, output: Option<&Path>) -> Result<PathBuf> {
    let input = log
        .map(Path::to_path_buf)
        .or_else(|| cfg.ingest.input.clone())
        .context("no usage log given (pass a path or set ingest.input)")?;
    let tz = parse_offset(&cfg.ingest.timezone)?;
    let calendar: Option<Calendar> = match (cfg.ingest.start, cfg.ingest.end) {
        (Some(s), Some(e)) => Some(build_calendar(s, e)?),
        (None, None) => None,
        _ => bail!("ingest.start and ingest.end must be set together"),
    };
    let keys = cfg.ingest.keys.iter().map(|k| parse_key(k)).collect::<Result<Vec<_>>>()?;
    let (events, mut stats) = read_log_events(open_maybe_gz(&input)?)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.panel_path());
    let panel = panel_from_events(&events, calendar, &tz, &keys, &mut stats)?;
    match &panel {
        Some(p) => write_panel(p, &out)?,
        None => {
            log::warn!("the log has no events and no series are configured; writing an empty panel");
            let mut w = create(&out)?;
            writeln!(w, "date,profession,module,region,count")?;
            w.flush()?;
        }
    }
    println!(
        "rows {}  skipped {} ({:.1}%)  out of range {}  series {}  days {}",
        stats.rows,
        stats.skipped,
        100.0 * stats.skip_fraction(),
        stats.out_of_range,
        panel.as_ref().map_or(0, |p| p.len()),
        panel.as_ref().map_or(0, |p| p.calendar().length),
    );
    Ok(out)
}

pub fn synth(cfg: &RunConfig, output: Option<&Path>) -> Result<PathBuf> {
    let panel = synth_panel(&cfg.synth)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.panel_path());
    write_panel(&panel, &out)?;
    println!(
        "{} series x {} days from {} written to {}",
        panel.len(),
        panel.calendar().length,
        panel.calendar().start,
        out.display()
    );
    Ok(out)
}

pub fn backtest(cfg: &RunConfig, panel_path: Option<&Path>) -> Result<BacktestReport> {
    let path = panel_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.panel_path());
    let panel = read_panel(&path)?;
    let report = run_backtest(&panel, &cfg.backtest, &cfg.models, cfg.seed)?;
    write_report(&report, &cfg.out)?;
    print!("{}", format_summary(&report.aggregate));
    if !report.aborted.is_empty() {
        let names: Vec<String> = report
            .aborted
            .iter()
            .map(|a| format!("{} at {} ({})", a.model, a.origin, a.reason))
            .collect();
        bail!(
            "model aborted: {}; partial report written to {}",
            names.join("; "),
            cfg.out.display()
        );
    }
    Ok(report)
}

pub fn forecast(cfg: &RunConfig, panel_path: Option<&Path>, origin: Option<NaiveDate>) -> Result<()> {
    let path = panel_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.panel_path());
    let panel = read_panel(&path)?;
    let history = match origin.or(cfg.forecast.origin) {
        Some(o) => {
            let idx = panel.calendar().offset_of(o);
            if idx <= 0 || idx > panel.calendar().length as i64 {
                bail!(
                    "origin {o} must fall after the first day and at most one day past the last day {}",
                    panel.calendar().end()
                );
            }
            panel.slice(0, idx as usize)?
        }
        None => panel,
    };
    let first = history.calendar().end() + chrono::Duration::days(1);
    let f = &cfg.forecast;
    let results = forecast_models(&history, &f.models, &cfg.models, f.horizon, f.season, f.validation_tail, cfg.seed)?;
    let root = cfg.out.join("forecast").join(first.to_string());
    let mut failed = 0;
    for r in &results {
        let dir = root.join(r.model.name());
        let (mut ok, mut flagged) = (0, 0);
        for (key, outcome) in &r.outcomes {
            match outcome {
                Ok((dist, flag)) => {
                    let mut w = create(&dir.join(format!("{}.csv", key.slug())))?;
                    write_point_forecast_csv(first, dist, &mut w)?;
                    w.flush()?;
                    ok += 1;
                    if let Some(flag) = flag {
                        flagged += 1;
                        log::warn!("{} {key}: {flag}", r.model);
                    }
                }
                Err(reason) => {
                    failed += 1;
                    log::error!("{} {key}: {reason}", r.model);
                }
            }
        }
        if let Some(net) = &r.trained {
            net.save(&dir.join("model"))?;
        }
        println!("{:<16}{ok:>5} series forecast{flagged:>5} fallbacks", r.model.name());
    }
    println!("forecasts from {first} written to {}", root.display());
    if failed > 0 {
        bail!("{failed} series could not be forecast");
    }
    Ok(())
}

pub fn plot(cfg: &RunConfig, forecasts: Option<&Path>, output: Option<&Path>) -> Result<Vec<PathBuf>> {
    let src = forecasts.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("forecasts"));
    let dst = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("plots"));
    let written = plot_forecast_dir(&src, &dst)?;
    println!("{} charts written to {}", written.len(), dst.display());
    Ok(written)
}

pub fn report(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let path = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.report.input.clone())
        .unwrap_or_else(|| cfg.out.join("report.json"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: BacktestReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if aggregate(&report.records)? != report.aggregate {
        bail!("aggregates in {} do not match its records", path.display());
    }
    print!("{}", format_summary(&report.aggregate));
    let metric = cfg.report.metric;
    println!("\n{} by origin month", metric.name());
    println!("{:<16}{:>9}{:>6}{:>10}{:>10}{:>10}", "model", "month", "n", "q1", "median", "q3");
    for b in report.aggregate.monthly.iter().filter(|b| b.metric == metric) {
        println!(
            "{:<16}{:>9}{:>6}{:>10.4}{:>10.4}{:>10.4}",
            b.model, b.month, b.n, b.q1, b.median, b.q3
        );
    }
    let p = &report.provenance;
    println!("\nseed {}  config {}  panel {}", p.seed, &p.config_hash[..12], &p.panel_hash[..12]);
    for a in &report.aborted {
        println!("aborted: {} at {} ({})", a.model, a.origin, a.reason);
    }
    Ok(())
}
