//! Deterministic SVG 1.1 figures: smooth curves with ±1 SE bands, box-plot
//! summaries, a multi-day diel window and an importance bar chart.
//!
//! Output bytes depend only on the inputs: coordinates are printed with
//! two decimals and nothing is timestamped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

use crate::gam::SmoothPoint;
use crate::gamm::ImportanceReport;
use crate::ingest::{unit_for, AlignedFrame, ColumnSummary, TIME_COLUMN};
use crate::report::{Report, ReportError, TermReport};

/// Points on each smooth curve.
pub const CURVE_POINTS: usize = 200;
pub const DIEL_DAYS: i64 = 5;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("plot: {0}")]
    Report(#[from] ReportError),
    #[error("plot: nothing to draw: {0}")]
    Empty(String),
    #[error("plot: cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn label(name: &str) -> String {
    let unit = unit_for(name);
    if unit.is_empty() {
        name.to_string()
    } else {
        format!("{name} ({unit})")
    }
}

/// Affine map from data to pixels.
#[derive(Debug, Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn new((d0, d1): (f64, f64), p0: f64, p1: f64) -> Self {
        Self { d0, d1, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

/// Data range padded by 5% on each side; degenerate ranges widen to ±1.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 1.0, c + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Roughly `target` round tick values inside `[lo, hi]`, with the decimals
/// needed to print them.
fn ticks(lo: f64, hi: f64, target: usize) -> (Vec<f64>, usize) {
    let span = hi - lo;
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let m = [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .find(|m| span / (m * mag) <= target as f64)
        .unwrap_or(10.0);
    let step = m * mag;
    let mut decimals = (-mag.log10().round()).max(0.0) as usize;
    if m == 2.5 && mag <= 1.0 {
        decimals += 1;
    }
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut out = String::new();
        writeln!(out, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#).unwrap();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = num(width),
            h = num(height)
        )
        .unwrap();
        writeln!(out, "<title>{}</title>", escape(title)).unwrap();
        writeln!(
            out,
            r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#,
            num(width),
            num(height)
        )
        .unwrap();
        Self { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        writeln!(
            self.out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" {style}/>"#,
            num(x1),
            num(y1),
            num(x2),
            num(y2)
        )
        .unwrap();
    }

    fn polyline(&mut self, pts: &[(f64, f64)], style: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", num(*x), num(*y))).collect();
        writeln!(
            self.out,
            r#"<polyline fill="none" {style} points="{}"/>"#,
            coords.join(" ")
        )
        .unwrap();
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, style: &str) {
        writeln!(
            self.out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" {style}/>"#,
            num(x),
            num(y),
            num(w.max(0.0)),
            num(h.max(0.0))
        )
        .unwrap();
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, style: &str) {
        writeln!(
            self.out,
            r#"<circle cx="{}" cy="{}" r="{}" {style}/>"#,
            num(x),
            num(y),
            num(r)
        )
        .unwrap();
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        writeln!(
            self.out,
            r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#,
            num(x),
            num(y),
            escape(s)
        )
        .unwrap();
    }

    fn vtext(&mut self, x: f64, y: f64, s: &str) {
        writeln!(
            self.out,
            r#"<text x="{x}" y="{y}" text-anchor="middle" transform="rotate(-90 {x} {y})">{}</text>"#,
            escape(s),
            x = num(x),
            y = num(y)
        )
        .unwrap();
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

const AXIS: &str = r#"stroke="black" stroke-width="1""#;
const GRID: &str = r##"stroke="#dddddd" stroke-width="1""##;

/// Frame, ticks and tick labels of one panel.
fn axes(svg: &mut Svg, xs: Scale, ys: Scale, xt: (Vec<f64>, usize), yt: (Vec<f64>, usize)) {
    let (x0, x1) = (xs.p0, xs.p1);
    let (y0, y1) = (ys.p0, ys.p1);
    for &t in &yt.0 {
        let y = ys.map(t);
        svg.line(x0, y, x1, y, GRID);
        svg.line(x0 - 4.0, y, x0, y, AXIS);
        svg.text(x0 - 6.0, y + 4.0, "end", &format!("{t:.*}", yt.1));
    }
    for &t in &xt.0 {
        let x = xs.map(t);
        svg.line(x, y0, x, y0 + 4.0, AXIS);
        svg.text(x, y0 + 17.0, "middle", &format!("{t:.*}", xt.1));
    }
    svg.line(x0, y0, x1, y0, AXIS);
    svg.line(x0, y0, x0, y1, AXIS);
}

/// Estimate and ±1 SE on the 200-point grid over the observed range. These
/// are the values the smooth figure draws.
pub fn smooth_curve(term: &TermReport) -> Result<Vec<SmoothPoint>, PlotError> {
    Ok(term.curve(&term.grid(CURVE_POINTS))?)
}

pub fn smooth_svg(term: &TermReport) -> Result<String, PlotError> {
    let pts = smooth_curve(term)?;
    let lo = pts.iter().map(|p| p.estimate - p.se).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.estimate + p.se).fold(f64::NEG_INFINITY, f64::max);
    let xr = term.evaluator.range;
    let xr = if xr.1 > xr.0 { xr } else { padded(xr.0, xr.1) };
    let yr = padded(lo, hi);
    let xs = Scale::new(xr, LEFT, WIDTH - RIGHT);
    let ys = Scale::new(yr, HEIGHT - BOTTOM, TOP);
    let mut svg = Svg::new(WIDTH, HEIGHT, &format!("Smooth of {}", term.covariate));
    axes(&mut svg, xs, ys, ticks(xr.0, xr.1, 6), ticks(yr.0, yr.1, 6));
    let zero = ys.map(0.0);
    if (TOP..=HEIGHT - BOTTOM).contains(&zero) {
        svg.line(LEFT, zero, WIDTH - RIGHT, zero, r##"stroke="#999999" stroke-width="0.5""##);
    }
    let dashed = r#"stroke="black" stroke-width="1" stroke-dasharray="5,4""#;
    let band = |sign: f64| -> Vec<(f64, f64)> {
        pts.iter().map(|p| (xs.map(p.x), ys.map(p.estimate + sign * p.se))).collect()
    };
    svg.polyline(&band(1.0), dashed);
    svg.polyline(&band(-1.0), dashed);
    svg.polyline(&band(0.0), r#"stroke="black" stroke-width="2""#);
    svg.text(WIDTH / 2.0, HEIGHT - 14.0, "middle", &label(&term.covariate));
    svg.vtext(18.0, (TOP + HEIGHT - BOTTOM) / 2.0, &format!("s({})", term.covariate));
    svg.text(
        WIDTH - RIGHT,
        22.0,
        "end",
        &format!("edf {:.2}", term.edf),
    );
    Ok(svg.finish())
}

/// One panel per column: whiskers at the extremes, box from Q1 to Q3, a
/// median bar and a mean dot. Each panel has its own vertical scale.
pub fn summary_svg(summary: &[ColumnSummary], site: &str) -> Result<String, PlotError> {
    if summary.is_empty() {
        return Err(PlotError::Empty("summary has no columns".into()));
    }
    let panel_w = 150.0;
    let width = panel_w * summary.len() as f64;
    let height = 360.0;
    let (top, bottom) = (40.0, 300.0);
    let mut svg = Svg::new(width, height, &format!("{site} water-quality summary"));
    for (i, c) in summary.iter().enumerate() {
        let x0 = i as f64 * panel_w;
        let axis_x = x0 + 52.0;
        let cx = x0 + 100.0;
        let yr = padded(c.min, c.max);
        let ys = Scale::new(yr, bottom, top);
        let (yt, dec) = ticks(yr.0, yr.1, 5);
        for &t in &yt {
            let y = ys.map(t);
            svg.line(axis_x - 4.0, y, axis_x, y, AXIS);
            svg.text(axis_x - 6.0, y + 4.0, "end", &format!("{t:.dec$}"));
        }
        svg.line(axis_x, bottom, axis_x, top, AXIS);
        svg.line(cx, ys.map(c.min), cx, ys.map(c.q1), AXIS);
        svg.line(cx, ys.map(c.q3), cx, ys.map(c.max), AXIS);
        svg.line(cx - 10.0, ys.map(c.min), cx + 10.0, ys.map(c.min), AXIS);
        svg.line(cx - 10.0, ys.map(c.max), cx + 10.0, ys.map(c.max), AXIS);
        svg.rect(
            cx - 22.0,
            ys.map(c.q3),
            44.0,
            ys.map(c.q1) - ys.map(c.q3),
            r##"fill="#cfe0f1" stroke="black" stroke-width="1""##,
        );
        svg.line(cx - 22.0, ys.map(c.median), cx + 22.0, ys.map(c.median), r#"stroke="black" stroke-width="2""#);
        svg.circle(cx, ys.map(c.mean), 3.0, r#"fill="black""#);
        svg.text(x0 + panel_w / 2.0, bottom + 24.0, "middle", &c.column);
        if !c.unit.is_empty() {
            svg.text(x0 + panel_w / 2.0, bottom + 40.0, "middle", &c.unit);
        }
    }
    Ok(svg.finish())
}

/// Stacked time-series panels over `days` days from `start`, one per
/// variable (response first). Invalid rows and absent grid rows break the
/// lines. The axis is in hours since `start` (UTC).
pub fn diel_svg(
    frame: &AlignedFrame,
    start: DateTime<Utc>,
    days: i64,
    utc_offset_hours: i32,
) -> Result<String, PlotError> {
    let end = start + Duration::days(days);
    let rows: Vec<usize> = (0..frame.len())
        .filter(|&i| frame.grid[i] >= start && frame.grid[i] < end)
        .collect();
    if !rows.iter().any(|&i| frame.valid[i]) {
        return Err(PlotError::Empty(format!("no valid rows in the window starting {start}")));
    }
    let mut names = vec![frame.response_name.clone()];
    names.extend(frame.covariate_names().into_iter().filter(|n| n != TIME_COLUMN));
    let panel_h = 110.0;
    let top = 40.0;
    let height = top + panel_h * names.len() as f64 + 50.0;
    let hours = (days * 24) as f64;
    let xs = Scale::new((0.0, hours), LEFT, WIDTH - RIGHT);
    let mut svg = Svg::new(WIDTH, height, "Diel window");
    svg.text(
        LEFT,
        22.0,
        "start",
        &format!(
            "from {} UTC (site local = UTC{:+})",
            start.format("%Y-%m-%d %H:%M"),
            utc_offset_hours
        ),
    );
    for (k, name) in names.iter().enumerate() {
        let col: &[f64] = if *name == frame.response_name {
            &frame.response
        } else {
            frame.covariate(name).expect("listed covariate")
        };
        let p_top = top + k as f64 * panel_h + 8.0;
        let p_bot = top + (k + 1) as f64 * panel_h - 14.0;
        let vals: Vec<f64> = rows.iter().filter(|&&i| frame.valid[i]).map(|&i| col[i]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let yr = padded(lo, hi);
        let ys = Scale::new(yr, p_bot, p_top);
        let xt = if k + 1 == names.len() {
            ticks(0.0, hours, days as usize)
        } else {
            (Vec::new(), 0)
        };
        axes(&mut svg, xs, ys, xt, ticks(yr.0, yr.1, 3));
        svg.vtext(16.0, (p_top + p_bot) / 2.0, name);
        let mut run: Vec<(f64, f64)> = Vec::new();
        let mut prev: Option<DateTime<Utc>> = None;
        for &i in &rows {
            let t = frame.grid[i];
            let contiguous = prev.is_some_and(|p| (t - p).num_seconds() == crate::ingest::GRID_STEP_SECS);
            if !frame.valid[i] || !contiguous {
                if run.len() > 1 {
                    svg.polyline(&run, r#"stroke="black" stroke-width="1""#);
                }
                run.clear();
            }
            if frame.valid[i] {
                let h = (t - start).num_seconds() as f64 / 3600.0;
                run.push((xs.map(h), ys.map(col[i])));
            }
            prev = Some(t);
        }
        if run.len() > 1 {
            svg.polyline(&run, r#"stroke="black" stroke-width="1""#);
        }
    }
    svg.text(WIDTH / 2.0, height - 12.0, "middle", "hours since window start (UTC)");
    Ok(svg.finish())
}

/// Horizontal bars in ranking order followed by the ARMA share.
pub fn importance_svg(imp: &ImportanceReport) -> Result<String, PlotError> {
    let mut bars: Vec<(String, f64)> = imp
        .ranking
        .iter()
        .filter_map(|c| imp.importance(c).map(|v| (c.clone(), v)))
        .collect();
    bars.push(("ARMA".to_string(), imp.arma_share));
    let row_h = 28.0;
    let top = 40.0;
    let height = top + row_h * bars.len() as f64 + 56.0;
    let lo = bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let xr = padded(lo, hi.max(lo + 1.0));
    let left = 120.0;
    let xs = Scale::new(xr, left, WIDTH - RIGHT);
    let bottom = top + row_h * bars.len() as f64;
    let mut svg = Svg::new(WIDTH, height, "Variable importance");
    svg.text(
        left,
        22.0,
        "start",
        &format!("total deviance explained {:.2}%", 100.0 * imp.de_total),
    );
    let ys = Scale::new((0.0, 1.0), bottom, top);
    axes(&mut svg, xs, ys, ticks(xr.0, xr.1, 6), (Vec::new(), 0));
    let zero = xs.map(0.0);
    for (k, (name, v)) in bars.iter().enumerate() {
        let y = top + k as f64 * row_h + 5.0;
        let (x, w) = if *v >= 0.0 {
            (zero, xs.map(*v) - zero)
        } else {
            (xs.map(*v), zero - xs.map(*v))
        };
        let fill = if name == "ARMA" {
            r##"fill="#9a9a9a""##
        } else {
            r##"fill="#3b6ea5""##
        };
        svg.rect(x, y, w, row_h - 10.0, fill);
        svg.text(left - 8.0, y + row_h / 2.0, "end", name);
    }
    svg.line(zero, top, zero, bottom, AXIS);
    svg.text(
        (left + WIDTH - RIGHT) / 2.0,
        height - 12.0,
        "middle",
        "importance (percentage points of deviance)",
    );
    Ok(svg.finish())
}

fn write(path: &Path, text: &str) -> Result<PathBuf, PlotError> {
    fs::write(path, text).map_err(|source| PlotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path.to_path_buf())
}

/// `<dir>/smooths/<term>.svg` for every term of the report.
pub fn plot_smooths(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let sub = dir.join("smooths");
    fs::create_dir_all(&sub).map_err(|source| PlotError::Io {
        path: sub.display().to_string(),
        source,
    })?;
    report
        .gam
        .terms
        .iter()
        .map(|t| write(&sub.join(format!("{}.svg", t.covariate)), &smooth_svg(t)?))
        .collect()
}

/// Smooths, the summary box plots and (when present) importance bars.
pub fn plot_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut out = plot_smooths(report, dir)?;
    out.push(write(&dir.join("summary.svg"), &summary_svg(&report.summary, &report.site)?)?);
    if let Some(imp) = &report.importance {
        out.push(write(&dir.join("importance.svg"), &importance_svg(imp)?)?);
    }
    Ok(out)
}

pub fn write_diel(
    frame: &AlignedFrame,
    start: DateTime<Utc>,
    utc_offset_hours: i32,
    dir: &Path,
) -> Result<PathBuf, PlotError> {
    write(&dir.join("diel.svg"), &diel_svg(frame, start, DIEL_DAYS, utc_offset_hours)?)
}
