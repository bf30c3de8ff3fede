//! Minimal SVG line plots of original, reconstructed and error series.

use std::fmt::Write;

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 180.0;
const MARGIN: f64 = 40.0;

fn polyline(out: &mut String, values: &[f64], lo: f64, hi: f64, top: f64, color: &str) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let dx = if values.len() > 1 {
        (WIDTH - 2.0 * MARGIN) / (values.len() - 1) as f64
    } else {
        0.0
    };
    let _ = write!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points=""#);
    for (i, v) in values.iter().enumerate() {
        let x = MARGIN + i as f64 * dx;
        let y = top + PANEL_HEIGHT - (v - lo) / span * PANEL_HEIGHT;
        let _ = write!(out, "{x:.2},{y:.2} ");
    }
    out.push_str("\"/>\n");
}

fn bounds<'a>(series: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    series
        .into_iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

/// Two stacked panels: original vs reconstructed on top, error below. An
/// optional shaded span marks ground-truth theft samples.
pub fn reconstruction_svg(
    title: &str,
    original: &[f64],
    reconstructed: &[f64],
    errors: &[f64],
    theft_span: Option<(usize, usize)>,
) -> String {
    let height = 2.0 * PANEL_HEIGHT + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20">{}</text>"#, escape(title));
    let top2 = 2.0 * MARGIN + PANEL_HEIGHT;
    if let Some((a, b)) = theft_span {
        let n = original.len().max(2) - 1;
        let scale = (WIDTH - 2.0 * MARGIN) / n as f64;
        let x = MARGIN + a as f64 * scale;
        let w = (b.saturating_sub(a)) as f64 * scale;
        for top in [MARGIN, top2] {
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{top}" width="{w:.2}" height="{PANEL_HEIGHT}" fill="#f4cccc"/>"##
            );
        }
    }
    for top in [MARGIN, top2] {
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL_HEIGHT}" fill="none" stroke="black"/>"#,
            WIDTH - 2.0 * MARGIN
        );
    }
    let (lo, hi) = bounds([original, reconstructed]);
    polyline(&mut out, original, lo, hi, MARGIN, "steelblue");
    polyline(&mut out, reconstructed, lo, hi, MARGIN, "darkorange");
    let (elo, ehi) = bounds([errors]);
    polyline(&mut out, errors, elo.min(0.0), ehi, top2, "firebrick");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">original (blue), reconstructed (orange)</text>"#,
        MARGIN,
        MARGIN - 5.0
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}">reconstruction error</text>"#, MARGIN, top2 - 5.0);
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
