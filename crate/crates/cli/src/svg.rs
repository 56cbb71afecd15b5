//! Minimal SVG line charts over plot tables.

use std::fmt::Write as _;

use crate::aggregate::PlotTable;

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// x is the first key column, y is linear over the data range.
pub fn line_chart(t: &PlotTable) -> String {
    let xs: Vec<f64> = t.keys.iter().map(|k| k[0] as f64).collect();
    let ys = t.values.iter().flatten().flatten().copied();
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let x0 = xs.first().copied().unwrap_or(0.0);
    let mut x1 = xs.last().copied().unwrap_or(1.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for m in &t.markers {
        let x = px(*m as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{PAD}" x2="{x:.2}" y2="{}" stroke="#bbbbbb" stroke-dasharray="3,3"/>"##,
            H - PAD
        );
    }
    for (c, name) in t.variants.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        let mut pts = String::new();
        for (x, row) in xs.iter().zip(&t.values) {
            if let Some(y) = row[c] {
                let _ = write!(pts, "{:.2},{:.2} ", px(*x), py(y));
            }
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.trim_end());
        let ly = PAD + 16.0 * (c as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, W - PAD - 150.0);
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - PAD + 32.0, t.key_columns[0]);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, PAD - 4.0, PAD + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, PAD - 12.0, t.name);
    s.push_str("</svg>\n");
    s
}
