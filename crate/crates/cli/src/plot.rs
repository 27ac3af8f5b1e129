//! Minimal SVG line charts from the run's CSV files.
//!
//! Three layouts are recognized by header: `checkpoint,probe,gap` (one series
//! per probe), `layer,index,eigenvalue,selected` (one series per layer) and a
//! generic `x,y1,y2,…` table (one series per y column).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const TICKS: usize = 10;
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub log_y: bool,
}

fn parse_num(s: &str, row: usize, column: &str) -> Result<f64, CliError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| CliError::input(Some(row), format!("column `{column}`: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::input(
            Some(row),
            format!("column `{column}`: non-finite value"),
        ));
    }
    Ok(v)
}

/// Appends a point to the named series, creating it on first use so that
/// series keep their order of first appearance.
fn push(series: &mut Vec<Series>, name: &str, p: (f64, f64)) {
    match series.iter_mut().find(|s| s.name == name) {
        Some(s) => s.points.push(p),
        None => series.push(Series {
            name: name.to_string(),
            points: vec![p],
        }),
    }
}

/// Parses CSV text into a chart. Rows are numbered from 1 with the header as
/// row 1, matching what a text editor shows.
pub fn parse_chart(text: &str, log_y: bool) -> Result<Chart, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(Some(1), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(CliError::input(None, "empty CSV"));
    }
    let cols: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut series = Vec::new();
    let (x_label, y_label, log_y) = match cols.as_slice() {
        ["checkpoint", "probe", "gap"] => ("checkpoint", "modality gap", log_y),
        ["layer", "index", "eigenvalue", "selected"] => ("index", "eigenvalue", true),
        [_, rest @ ..] if !rest.is_empty() => (cols[0], if rest.len() == 1 { rest[0] } else { "value" }, log_y),
        _ => return Err(CliError::input(Some(1), "need at least two columns")),
    };
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::input(Some(row), e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(CliError::input(
                Some(row),
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        rows += 1;
        match cols.as_slice() {
            ["checkpoint", "probe", "gap"] => {
                let p = (parse_num(&rec[0], row, cols[0])?, parse_num(&rec[2], row, cols[2])?);
                push(&mut series, &rec[1], p);
            }
            ["layer", "index", "eigenvalue", "selected"] => {
                let layer = parse_num(&rec[0], row, cols[0])?;
                let p = (parse_num(&rec[1], row, cols[1])?, parse_num(&rec[2], row, cols[2])?);
                parse_num(&rec[3], row, cols[3])?;
                push(&mut series, &format!("layer {layer}"), p);
            }
            _ => {
                let x = parse_num(&rec[0], row, cols[0])?;
                for (j, name) in cols.iter().enumerate().skip(1) {
                    push(&mut series, name, (x, parse_num(&rec[j], row, name)?));
                }
            }
        }
    }
    if rows == 0 {
        return Err(CliError::input(None, "empty CSV (header only)"));
    }
    Ok(Chart {
        x_label: x_label.to_string(),
        y_label: y_label.to_string(),
        series,
        log_y,
    })
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Trims trailing zeros so tick labels stay short but deterministic.
fn tick_label(v: f64) -> String {
    let s = if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn render_svg(chart: &Chart) -> Result<String, CliError> {
    // Non-positive values have no place on a log axis and are dropped.
    let transform = |y: f64| {
        if chart.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    };
    let plotted: Vec<(&Series, Vec<(f64, f64)>)> = chart
        .series
        .iter()
        .map(|s| {
            (
                s,
                s.points.iter().filter_map(|&(x, y)| Some((x, transform(y)?))).collect(),
            )
        })
        .collect();
    let all = || plotted.iter().flat_map(|(_, p)| p.iter().copied());
    let (x0, x1) = range(all().map(|p| p.0)).ok_or_else(|| CliError::input(None, "no plottable points"))?;
    let (y0, y1) = range(all().map(|p| p.1)).ok_or_else(|| CliError::input(None, "no plottable points"))?;

    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (bx, by) = (MARGIN_LEFT + pw, MARGIN_TOP + ph);
    let _ = writeln!(
        svg,
        r#"<path d="M{MARGIN_LEFT} {MARGIN_TOP} V{by} H{bx}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let ylab = if chart.log_y {
            tick_label(10f64.powf(yv))
        } else {
            tick_label(yv)
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{by}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            by + 5.0,
            by + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{ylab}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(&chart.x_label)
    );
    let y_title = if chart.log_y {
        format!("{} (log scale)", chart.y_label)
    } else {
        chart.y_label.clone()
    };
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(&y_title)
    );
    for (i, (s, pts)) in plotted.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn plot_file(input: &Path, output: &Path, log_y: bool) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::input(None, format!("cannot read {}: {e}", input.display())))?;
    let svg = render_svg(&parse_chart(&text, log_y)?)?;
    std::fs::write(output, svg).map_err(|e| CliError::runtime("output", format!("{}: {e}", output.display())))
}
