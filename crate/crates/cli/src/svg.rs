//! Minimal static SVG charts for the report tables.

use std::fmt::Write;

use orim_core::ErrorReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    log_y: bool,
}

impl Frame {
    fn new(xs: &[f64], ys: &[f64], log_y: bool) -> Self {
        let range = |vals: Vec<f64>| {
            let (lo, hi) = vals
                .into_iter()
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let ys = ys
            .iter()
            .map(|&v| match (log_y, v > 0.0) {
                (false, _) => v,
                (true, true) => v.log10(),
                (true, false) => f64::NAN,
            })
            .collect();
        Frame {
            x: range(xs.to_vec()),
            y: range(ys),
            log_y,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> Option<f64> {
        let v = if self.log_y {
            if y <= 0.0 {
                return None;
            }
            y.log10()
        } else {
            y
        };
        v.is_finite()
            .then(|| HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN))
    }

    fn y_label(&self, frac: f64) -> String {
        let v = self.y.0 + frac * (self.y.1 - self.y.0);
        if self.log_y {
            format!("{:.2e}", 10f64.powf(v))
        } else {
            format!("{v:.3e}")
        }
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str, x_ticks: bool) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = b - frac * (b - t);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 4.0,
            y + 4.0,
            frame.y_label(frac)
        );
        if x_ticks {
            let xv = frame.x.0 + frac * (frame.x.1 - frame.x.0);
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                frame.px(xv),
                b + 14.0,
                format_tick(xv)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with markers; non-positive values are dropped on a log axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let frame = Frame::new(&xs, &ys, log_y);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, x_label, y_label, true);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter_map(|&(x, y)| frame.py(y).map(|py| (frame.px(x), py)))
            .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for (x, y) in &pts {
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#);
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Box-and-whisker chart, one box per labeled report.
pub fn box_chart(title: &str, y_label: &str, boxes: &[(&str, &ErrorReport)]) -> String {
    let ys: Vec<f64> = boxes
        .iter()
        .flat_map(|(_, r)| {
            [r.whisker_lo, r.whisker_hi]
                .into_iter()
                .chain(r.outliers.iter().map(|o| o.1))
        })
        .collect();
    let frame = Frame::new(&[0.0, boxes.len() as f64], &ys, false);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "", y_label, false);
    let slot = (WIDTH - 2.0 * MARGIN) / boxes.len().max(1) as f64;
    let half = slot * 0.25;
    for (i, (label, r)) in boxes.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let y = |v: f64| frame.py(v).unwrap_or(HEIGHT - MARGIN);
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{cx}" x2="{cx}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
            y(r.whisker_lo),
            y(r.whisker_hi)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
            cx - half,
            y(r.p75),
            2.0 * half,
            (y(r.p25) - y(r.p75)).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            y(r.median),
            y(r.median)
        );
        for &(_, v) in &r.outliers {
            let _ = writeln!(
                out,
                r#"<circle cx="{cx}" cy="{:.2}" r="1.5" fill="none" stroke="{color}"/>"#,
                y(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Step outlines of several histograms sharing one axis.
pub fn density_chart(title: &str, x_label: &str, hists: &[(&str, &orim_core::evalstats::Histogram)]) -> String {
    let series: Vec<Series> = hists
        .iter()
        .map(|(label, h)| {
            let mut points = Vec::with_capacity(2 * h.density.len());
            for (i, &d) in h.density.iter().enumerate() {
                points.push((h.edges[i], d));
                points.push((h.edges[i + 1], d));
            }
            Series { label, points }
        })
        .collect();
    line_chart(title, x_label, "density", &series, false)
}
