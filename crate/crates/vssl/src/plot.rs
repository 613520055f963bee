//! Minimal SVG line charts.

use std::fmt::Write as _;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 52.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Lines with markers plus dashed horizontal reference lines.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], references: &[(String, f64)]) -> String {
    let (x0, x1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(references.iter().map(|r| r.1)));
    let px = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let py = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (PAD_L + W - PAD_R) / 2.0, escape(title));
    let (bx, by) = (PAD_L, H - PAD_B);
    let _ = writeln!(s, r#"<path d="M{bx:.1},{PAD_T:.1} L{bx:.1},{by:.1} L{:.1},{by:.1}" stroke="black" fill="none"/>"#, W - PAD_R);
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#, px(xv), by + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, bx - 6.0, py(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (PAD_L + W - PAD_R) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#, (PAD_T + by) / 2.0, (PAD_T + by) / 2.0, escape(y_label));
    let mut legend_y = PAD_T + 8.0;
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" stroke-width="2" fill="none"/>"#, d.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
        let lx = W - PAD_R + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{c}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 24.0, legend_y + 4.0, escape(&ser.name));
        legend_y += 18.0;
    }
    for (i, (name, y)) in references.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<line x1="{bx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-dasharray="5,4"/>"#, py(*y), W - PAD_R, py(*y));
        let lx = W - PAD_R + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{c}" stroke-dasharray="5,4"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 24.0, legend_y + 4.0, escape(name));
        legend_y += 18.0;
    }
    s.push_str("</svg>\n");
    s
}
