//! SVG charts of forecasts against actuals, one chart per (origin, series).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::panel::parse_date;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One model's forecast window as read back from its CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub model: String,
    pub dates: Vec<NaiveDate>,
    pub actual: Vec<f64>,
    pub point: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
}

/// Parse a `date,actual,point,q25,q75` file (column order free).
pub fn read_forecast_csv<R: Read>(reader: R, model: &str) -> Result<ForecastSeries> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("forecast file lacks a '{name}' column")))
    };
    let [date, actual, point, q25, q75] = [col("date")?, col("actual")?, col("point")?, col("q25")?, col("q75")?];
    let mut out = ForecastSeries {
        model: model.to_string(),
        dates: vec![],
        actual: vec![],
        point: vec![],
        q25: vec![],
        q75: vec![],
    };
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let num = |c: usize| -> Result<f64> {
            let s = row.get(c).unwrap_or("").trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("line {line}: '{s}' is not a finite number")))
        };
        out.dates.push(parse_date(row.get(date).unwrap_or("").trim())?);
        out.actual.push(num(actual)?);
        out.point.push(num(point)?);
        let (lo, hi) = (num(q25)?, num(q75)?);
        if lo > hi {
            return Err(Error::Format(format!("line {line}: q25 {lo} exceeds q75 {hi}")));
        }
        out.q25.push(lo);
        out.q75.push(hi);
    }
    if out.dates.is_empty() {
        return Err(Error::Format("forecast file has no rows".into()));
    }
    Ok(out)
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn path_points(xs: impl Iterator<Item = (f64, f64)>) -> String {
    xs.map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

/// Chart of every model's point forecast and shaded 50% band against the
/// actuals of the first series. All series must cover the same dates.
pub fn render_svg(title: &str, series: &[ForecastSeries]) -> Result<String> {
    let first = series
        .first()
        .ok_or_else(|| Error::Format("nothing to plot".into()))?;
    if let Some(s) = series.iter().find(|s| s.dates != first.dates) {
        return Err(Error::Format(format!(
            "model {} covers different dates than {}",
            s.model, first.model
        )));
    }
    let n = first.dates.len();
    let all = series
        .iter()
        .flat_map(|s| s.actual.iter().chain(&s.point).chain(&s.q25).chain(&s.q75));
    let (lo, hi) = all.fold((0.0f64, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let hi = if hi > lo { hi * 1.05 } else { lo + 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |i: usize| LEFT + if n > 1 { plot_w * i as f64 / (n - 1) as f64 } else { plot_w / 2.0 };
    let y = |v: f64| TOP + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{LEFT}" y="22" font-size="14">{}</text>"#, escape(title));

    // Axes with ISO date ticks about once a week and five value ticks.
    let (x0, x1, y0) = (LEFT, LEFT + plot_w, TOP + plot_h);
    let _ = writeln!(svg, r##"<g class="axis" stroke="#444">"##);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}"/>"#);
    let _ = writeln!(svg, "</g>");
    let step = n.div_ceil(5).max(1);
    for i in (0..n).step_by(step) {
        let _ = writeln!(
            svg,
            r#"<text class="date-tick" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(i),
            y0 + 18.0,
            first.dates[i]
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }

    for (m, s) in series.iter().enumerate() {
        let upper = (0..n).map(|i| (x(i), y(s.q75[i])));
        let lower = (0..n).rev().map(|i| (x(i), y(s.q25[i])));
        let _ = writeln!(
            svg,
            r#"<polygon class="band" data-model="{}" fill="{}" fill-opacity="0.2" stroke="none" points="{}"/>"#,
            escape(&s.model),
            color(m),
            path_points(upper.chain(lower))
        );
    }
    for (m, s) in series.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<polyline class="point" data-model="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.model),
            color(m),
            path_points((0..n).map(|i| (x(i), y(s.point[i]))))
        );
    }
    let _ = writeln!(
        svg,
        r#"<polyline class="actual" fill="none" stroke="black" stroke-width="2" points="{}"/>"#,
        path_points((0..n).map(|i| (x(i), y(first.actual[i]))))
    );

    let lx = WIDTH - RIGHT + 15.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{lx}" y1="{TOP}" x2="{}" y2="{TOP}" stroke="black" stroke-width="2"/><text x="{}" y="{}">actual</text>"#,
        lx + 20.0,
        lx + 26.0,
        TOP + 4.0
    );
    for (m, s) in series.iter().enumerate() {
        let ly = TOP + 18.0 * (m + 1) as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{:.2}" width="20" height="10" fill="{c}" fill-opacity="0.35" stroke="{c}"/><text x="{}" y="{:.2}">{} (50%)</text>"#,
            ly - 5.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.model),
            c = color(m)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Render every `<origin>/<model>/<series>.csv` below `forecasts` into
/// `<out>/<origin>__<series>.svg`. Returns the written paths in order.
pub fn plot_forecast_dir(forecasts: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<(String, String), Vec<ForecastSeries>> = BTreeMap::new();
    for origin_dir in sorted_entries(forecasts)?.into_iter().filter(|p| p.is_dir()) {
        let origin = file_name(&origin_dir);
        for model_dir in sorted_entries(&origin_dir)?.into_iter().filter(|p| p.is_dir()) {
            let model = file_name(&model_dir);
            for file in sorted_entries(&model_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("csv") {
                    continue;
                }
                let slug = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let series = read_forecast_csv(fs::File::open(&file)?, &model)
                    .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
                groups.entry((origin.clone(), slug)).or_default().push(series);
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Format(format!("no forecast files under {}", forecasts.display())));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for ((origin, slug), series) in groups {
        let path = out.join(format!("{origin}__{slug}.svg"));
        fs::write(&path, render_svg(&format!("{} from {origin}", slug.replace("__", " / ")), &series)?)?;
        written.push(path);
    }
    Ok(written)
}

fn file_name(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(model: &str, level: f64, half_width: f64) -> ForecastSeries {
        let dates: Vec<_> = parse_date("2020-06-01").unwrap().iter_days().take(10).collect();
        ForecastSeries {
            model: model.into(),
            actual: (0..10).map(|i| i as f64).collect(),
            point: vec![level; 10],
            q25: vec![level - half_width; 10],
            q75: vec![level + half_width; 10],
            dates,
        }
    }

    fn attr_points(svg: &str, class: &str, nth: usize) -> Vec<(f64, f64)> {
        let tag = svg.split(&format!("class=\"{class}\"")).nth(nth + 1).unwrap();
        let pts = tag.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        pts.split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect()
    }

    /// Shoelace area of a polygon.
    fn area(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len();
        (0..n)
            .map(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
            .abs()
            / 2.0
    }

    #[test]
    fn one_band_and_line_per_model() {
        let svg = render_svg("t", &[flat("a", 5.0, 1.0), flat("b", 3.0, 2.0)]).unwrap();
        assert_eq!(svg.matches("class=\"band\"").count(), 2);
        assert_eq!(svg.matches("class=\"point\"").count(), 2);
        assert_eq!(svg.matches("class=\"actual\"").count(), 1);
        assert!(svg.contains(">2020-06-01<"));
        assert!(svg.contains("a (50%)") && svg.contains("b (50%)"));
    }

    #[test]
    fn flat_forecast_is_horizontal_with_band() {
        let svg = render_svg("t", &[flat("a", 5.0, 1.0)]).unwrap();
        let line = attr_points(&svg, "point", 0);
        assert!(line.iter().all(|p| p.1 == line[0].1));
        let band = attr_points(&svg, "band", 0);
        assert!(area(&band) > 0.0);
        // Band edges straddle the point line.
        assert!(band[0].1 < line[0].1 && band[band.len() - 1].1 > line[0].1);
    }

    #[test]
    fn degenerate_band_has_zero_area() {
        let svg = render_svg("t", &[flat("a", 5.0, 0.0)]).unwrap();
        assert_eq!(area(&attr_points(&svg, "band", 0)), 0.0);
    }

    #[test]
    fn reader_validates_input() {
        let ok = "date,actual,point,q25,q75\n2020-06-01,1,2,1,3\n";
        let s = read_forecast_csv(ok.as_bytes(), "m").unwrap();
        assert_eq!(s.point, vec![2.0]);
        let crossed = "date,actual,point,q25,q75\n2020-06-01,1,2,4,3\n";
        assert!(matches!(read_forecast_csv(crossed.as_bytes(), "m"), Err(Error::Format(_))));
        let missing = "date,actual,point,q25\n2020-06-01,1,2,1\n";
        assert!(matches!(read_forecast_csv(missing.as_bytes(), "m"), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_dates_rejected() {
        let mut b = flat("b", 1.0, 1.0);
        b.dates.rotate_left(1);
        assert!(render_svg("t", &[flat("a", 1.0, 1.0), b]).is_err());
    }
}
