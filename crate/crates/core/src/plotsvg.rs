//! Self-contained SVG line and step plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postproc::FlukaData;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const TARGET_TICKS: f64 = 10.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("plot needs at least one series with two or more points")]
    EmptySeries,
    #[error("log-scaled {0} axis needs strictly positive data")]
    NonPositiveLogData(Axis),
    #[error("series `{label}` has mismatched lengths")]
    LengthMismatch { label: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yerr: Option<Vec<f64>>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotFlags {
    pub plot_error_bars: bool,
    pub plot_blocks: bool,
    /// Both axes logarithmic.
    pub log_scale: bool,
    pub semilogx: bool,
    pub semilogy: bool,
}

impl PlotFlags {
    pub fn log_x(&self) -> bool {
        self.log_scale || self.semilogx
    }

    pub fn log_y(&self) -> bool {
        self.log_scale || self.semilogy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub series: Vec<Series>,
    pub flags: PlotFlags,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, log: bool, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if log { (lo.log10(), hi.log10()) } else { (lo, hi) };
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
            (lo - pad, hi + pad)
        };
        Scale { lo, hi, log, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    /// Ticks in data units: decades on log axes, 1/2/5 steps otherwise.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let first = self.lo.ceil() as i32;
            let last = self.hi.floor() as i32;
            let mut t: Vec<f64> = (first..=last).map(|k| 10f64.powi(k)).collect();
            if t.is_empty() {
                t = vec![10f64.powf(self.lo), 10f64.powf(self.hi)];
            }
            t
        } else {
            let step = nice_step((self.hi - self.lo) / TARGET_TICKS);
            let first = (self.lo / step).ceil() as i64;
            let last = (self.hi / step + 1e-9).floor() as i64;
            (first..=last).map(|k| k as f64 * step).map(|v| if v.abs() < step * 1e-9 { 0.0 } else { v }).collect()
        }
    }
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        let e = v.log10().round() as i32;
        if (10f64.powi(e) - v).abs() <= 1e-9 * v {
            return format!("1e{e}");
        }
    }
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn validate(spec: &PlotSpec) -> Result<(), PlotError> {
    if spec.series.is_empty() || spec.series.iter().all(|s| s.x.len() < 2) {
        return Err(PlotError::EmptySeries);
    }
    for s in &spec.series {
        if s.x.len() != s.y.len() || s.yerr.as_ref().is_some_and(|e| e.len() != s.x.len()) {
            return Err(PlotError::LengthMismatch { label: s.label.clone() });
        }
        if spec.flags.log_x() && s.x.iter().any(|v| !(*v > 0.0)) {
            return Err(PlotError::NonPositiveLogData(Axis::X));
        }
        if spec.flags.log_y() && s.y.iter().any(|v| !(*v > 0.0)) {
            return Err(PlotError::NonPositiveLogData(Axis::Y));
        }
    }
    Ok(())
}

fn fmt_pt(x: f64, y: f64) -> String {
    format!("{x:.2},{y:.2}")
}

/// SVG document for `spec`; identical specs give identical bytes.
pub fn render_svg(spec: &PlotSpec) -> Result<String, PlotError> {
    validate(spec)?;
    let flags = spec.flags;
    let show_err = flags.plot_error_bars;
    let xs = spec.series.iter().flat_map(|s| s.x.iter().copied());
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in &spec.series {
        for (i, &y) in s.y.iter().enumerate() {
            let e = if show_err { s.yerr.as_ref().map_or(0.0, |e| e[i].abs()) } else { 0.0 };
            let lo = if flags.log_y() && y - e <= 0.0 { y } else { y - e };
            y_lo = y_lo.min(lo);
            y_hi = y_hi.max(y + e);
        }
    }
    if !flags.log_y() && y_lo > 0.0 && y_lo < 0.5 * y_hi {
        y_lo = 0.0;
    }
    let plot_right = WIDTH - RIGHT;
    let plot_bottom = HEIGHT - BOTTOM;
    let sx = Scale::new(x_lo, x_hi, flags.log_x(), LEFT, plot_right);
    let sy = Scale::new(y_lo, y_hi, flags.log_y(), plot_bottom, TOP);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(&spec.title)
    );

    let _ = writeln!(out, r##"<g class="grid" stroke="#dddddd" stroke-width="0.5">"##);
    let xticks: Vec<f64> = sx.ticks().into_iter().filter(|t| (sx.map(*t) - sx.map(*t).clamp(LEFT, plot_right)).abs() < 1e-6).collect();
    let yticks: Vec<f64> = sy.ticks().into_iter().filter(|t| (sy.map(*t) - sy.map(*t).clamp(TOP, plot_bottom)).abs() < 1e-6).collect();
    for &t in &xticks {
        let px = sx.map(t);
        let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{plot_bottom}"/>"#);
    }
    for &t in &yticks {
        let py = sy.map(t);
        let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{py:.2}" x2="{plot_right}" y2="{py:.2}"/>"#);
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(
        out,
        r#"<rect class="axes" x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        plot_right - LEFT,
        plot_bottom - TOP
    );
    let _ = writeln!(out, r#"<g class="xticks" text-anchor="middle">"#);
    for &t in &xticks {
        let px = sx.map(t);
        let _ = writeln!(
            out,
            r#"<line x1="{px:.2}" y1="{plot_bottom}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}">{}</text>"#,
            plot_bottom + 5.0,
            plot_bottom + 20.0,
            escape(&tick_label(t, flags.log_x()))
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="yticks" text-anchor="end">"#);
    for &t in &yticks {
        let py = sy.map(t);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            escape(&tick_label(t, flags.log_y()))
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + plot_right) / 2.0,
        HEIGHT - 20.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
        (TOP + plot_bottom) / 2.0,
        escape(&spec.y_label)
    );

    for (k, s) in spec.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<String> = Vec::with_capacity(s.x.len() * 2);
        for i in 0..s.x.len() {
            let (px, py) = (sx.map(s.x[i]), sy.map(s.y[i]));
            pts.push(fmt_pt(px, py));
            if flags.plot_blocks {
                if let Some(&next) = s.x.get(i + 1) {
                    pts.push(fmt_pt(sx.map(next), py));
                }
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        if let (true, Some(err)) = (show_err, &s.yerr) {
            let _ = writeln!(out, r#"<g class="errorbars" stroke="{color}" stroke-width="0.8">"#);
            for i in 0..s.x.len() {
                let px = sx.map(s.x[i]);
                let lo = if flags.log_y() && s.y[i] - err[i] <= 0.0 { s.y[i] } else { s.y[i] - err[i] };
                let _ = writeln!(
                    out,
                    r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}"/>"#,
                    sy.map(lo),
                    sy.map(s.y[i] + err[i])
                );
            }
            let _ = writeln!(out, "</g>");
        }
    }

    let _ = writeln!(out, r#"<g class="legend">"#);
    for (k, s) in spec.series.iter().enumerate() {
        let y = TOP + 18.0 + 18.0 * k as f64;
        let x = plot_right - 190.0;
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 24.0,
            COLORS[k % COLORS.len()],
            x + 30.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_plot(spec: &PlotSpec, out: &Path) -> Result<(), PlotError> {
    let svg = render_svg(spec)?;
    fs::write(out, svg).map_err(|source| PlotError::Io {
        path: out.to_path_buf(),
        source,
    })
}

/// Plot spec for one store entry, x at bin midpoints.
pub fn entry_plot(key: &str, entry: &crate::postproc::StoreEntry, flags: PlotFlags) -> PlotSpec {
    let rows = entry.rows();
    let (x, y): (Vec<f64>, Vec<f64>) = if flags.plot_blocks {
        // Steps need the closing edge of the last bin.
        let mut x: Vec<f64> = rows.iter().map(|r| r.elow).collect();
        let mut y: Vec<f64> = rows.iter().map(|r| r.value).collect();
        if let Some(last) = rows.last() {
            x.push(last.ehigh);
            y.push(last.value);
        }
        (x, y)
    } else {
        rows.iter().map(|r| (r.midpoint(), r.value)).unzip()
    };
    let mut yerr: Vec<f64> = rows.iter().map(|r| r.value.abs() * r.err_pct / 100.0).collect();
    if flags.plot_blocks {
        if let Some(&last) = yerr.last() {
            yerr.push(last);
        }
    }
    let mut title = format!("{key} ({})", entry.detector);
    if let Some(u) = entry.average_uncertainty {
        title.push_str(&format!(", average uncertainty {u:.2} %"));
    }
    PlotSpec {
        series: vec![Series {
            x,
            y,
            yerr: Some(yerr),
            label: entry.detector.clone(),
        }],
        flags,
        title,
        x_label: "Energy (GeV)".into(),
        y_label: "per GeV per primary".into(),
    }
}

/// One SVG per store entry with spectral rows, named after its key.
pub fn plot_store(data: &FlukaData, flags: PlotFlags, out_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut written = Vec::new();
    if data.files.is_empty() {
        return Ok(written);
    }
    fs::create_dir_all(out_dir).map_err(|source| PlotError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for (key, entry) in &data.files {
        if entry.rows().len() < 2 {
            continue;
        }
        let stem = key.strip_suffix(".lis").unwrap_or(key);
        let path = out_dir.join(format!("{stem}.svg"));
        render_plot(&entry_plot(key, entry, flags), &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(x: Vec<f64>, y: Vec<f64>, flags: PlotFlags) -> PlotSpec {
        PlotSpec {
            series: vec![Series {
                x,
                y,
                yerr: None,
                label: "a & <b>".into(),
            }],
            flags,
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
        }
    }

    #[test]
    fn two_point_polyline() {
        let svg = render_svg(&spec(vec![0.0, 1.0], vec![1.0, 2.0], PlotFlags::default())).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 2);
        assert!(svg.contains("a &amp; &lt;b&gt;"));
    }

    #[test]
    fn log_axis_rejects_nonpositive() {
        let flags = PlotFlags {
            semilogx: true,
            ..Default::default()
        };
        assert!(matches!(
            render_svg(&spec(vec![0.0, 1.0], vec![1.0, 2.0], flags)),
            Err(PlotError::NonPositiveLogData(Axis::X))
        ));
        assert!(matches!(render_svg(&spec(vec![1.0], vec![1.0], flags)), Err(PlotError::EmptySeries)));
    }

    #[test]
    fn decade_ticks() {
        let flags = PlotFlags {
            semilogx: true,
            ..Default::default()
        };
        let svg = render_svg(&spec(vec![1e-9, 1e-6, 1e-4], vec![1.0, 2.0, 3.0], flags)).unwrap();
        for e in -9..=-4 {
            assert!(svg.contains(&format!(">1e{e}<")), "missing 1e{e}");
        }
    }

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(0.13), 0.2);
        assert_eq!(nice_step(3.0), 5.0);
        assert_eq!(nice_step(7.0), 10.0);
        assert_eq!(nice_step(1.0), 1.0);
    }

    #[test]
    fn blocks_double_vertices() {
        let flags = PlotFlags {
            plot_blocks: true,
            ..Default::default()
        };
        let svg = render_svg(&spec(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 2.0], flags)).unwrap();
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 5);
    }
}
