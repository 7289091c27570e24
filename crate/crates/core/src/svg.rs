//! Minimal SVG polyline plots for loss and orthogonality curves.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;

/// Render one or more named series over a shared x axis (index-based).
pub fn line_chart(title: &str, series: &[(&str, &[f64])]) -> String {
    let mut all: Vec<f64> = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if all.is_empty() {
        all.push(0.0);
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-9);
    let n = series
        .iter()
        .map(|(_, ys)| ys.len())
        .max()
        .unwrap_or(1)
        .max(2);

    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{title}</text>",
        PAD
    );
    // axes
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#333\"/>",
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"#333\"/>",
        H - PAD
    );
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{lo:.3}</text>",
        H - PAD
    );
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{hi:.3}</text>",
        PAD + 4.0
    );
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * (si as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_valid_looking_svg() {
        let ys = [1.0, 0.5, 0.25, 0.125];
        let svg = line_chart("loss", &[("train", &ys)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn tolerates_nan_points() {
        let ys = [1.0, f64::NAN, 0.25];
        let svg = line_chart("orthogonality", &[("cos", &ys)]);
        assert!(svg.contains("polyline"));
    }
}
