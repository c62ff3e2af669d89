//! Minimal static SVG line charts for report artifacts.

use std::io::Write;
use std::path::Path;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Write a line chart. Axes are linear with automatic bounds.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> std::io::Result<()> {
    let (w, h) = (640.0f64, 420.0f64);
    let (ml, mr, mt, mb) = (62.0, 150.0, 40.0, 48.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0).abs()).max(0.02) * 0.08;
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{title}</text>"#,
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        h - mb
    ));
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let yy = sy(yv);
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{yy}" x2="{ml}" y2="{yy}" stroke="black"/><text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{yv:.3}</text>"#,
            ml - 4.0,
            ml - 7.0,
            yy + 4.0
        ));
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let xx = sx(xv);
        svg.push_str(&format!(
            r#"<line x1="{xx}" y1="{}" x2="{xx}" y2="{}" stroke="black"/><text x="{xx}" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif">{xv:.0}</text>"#,
            h - mb,
            h - mb + 4.0,
            h - mb + 18.0
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{x_label}</text>"#,
        (ml + w - mr) / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            d.join(" ")
        ));
        for (x, y) in &s.points {
            svg.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            ));
        }
        let ly = mt + 18.0 * i as f64;
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="11" font-family="sans-serif">{}</text>"#,
            w - mr + 8.0,
            w - mr + 28.0,
            w - mr + 34.0,
            ly + 4.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())
}
