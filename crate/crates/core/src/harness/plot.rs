//! Self-contained SVG line charts. Every chart is written together with a CSV
//! file holding exactly the plotted numbers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One line, optionally with a symmetric band of half-width `spread`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub spread: Option<Vec<f64>>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Renders the series as an SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = extent(series.iter().flat_map(|s| {
        let band = s.spread.clone().unwrap_or_else(|| vec![0.0; s.y.len()]);
        s.y.iter()
            .zip(band)
            .flat_map(|(y, d)| [y - d, y + d])
            .collect::<Vec<_>>()
    }));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            HEIGHT - MARGIN_B + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_L - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some(spread) = &s.spread {
            let upper: Vec<String> =
                s.x.iter()
                    .zip(&s.y)
                    .zip(spread)
                    .map(|((x, y), d)| format!("{:.2},{:.2}", px(*x), py(y + d)))
                    .collect();
            let lower: Vec<String> =
                s.x.iter()
                    .zip(&s.y)
                    .zip(spread)
                    .rev()
                    .map(|((x, y), d)| format!("{:.2},{:.2}", px(*x), py(y - d)))
                    .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
        }
        let pts: Vec<String> =
            s.x.iter()
                .zip(&s.y)
                .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
                .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#
            );
        }
        let ly = MARGIN_T + 16.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_R - 150.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// CSV twin of a chart: one row per plotted point.
pub fn chart_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y,spread\n");
    for s in series {
        for (k, (x, y)) in s.x.iter().zip(&s.y).enumerate() {
            let d = s.spread.as_ref().map_or(0.0, |d| d[k]);
            let _ = writeln!(out, "{},{x},{y},{d}", s.label);
        }
    }
    out
}

/// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
pub fn write_chart(
    dir: &Path,
    stem: &str,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, line_chart(title, x_label, y_label, series))
        .map_err(|e| Error::io(&svg, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, chart_csv(series)).map_err(|e| Error::io(&csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<Series> {
        vec![Series {
            label: "a<b".into(),
            x: vec![0.0, 1.0, 2.0],
            y: vec![3.0, 1.0, 2.0],
            spread: Some(vec![0.5, 0.1, 0.0]),
        }]
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = line_chart("t", "x", "y", &demo());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("<polygon"));
    }

    #[test]
    fn csv_twin_holds_plotted_numbers() {
        let csv = chart_csv(&demo());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "series,x,y,spread");
        assert_eq!(lines[1], "a<b,0,3,0.5");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn flat_and_empty_series_render() {
        let flat = vec![Series {
            label: "f".into(),
            x: vec![1.0],
            y: vec![5.0],
            spread: None,
        }];
        assert!(line_chart("", "", "", &flat).contains("<polyline"));
        assert!(line_chart("", "", "", &[]).ends_with("</svg>\n"));
    }
}
