//! Minimal SVG line chart of frame scores.

use std::fmt::Write;

use vera_core::manifest::Interval;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 260.0;
const MARGIN: f64 = 36.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline over all frames; ground-truth intervals shaded behind it.
/// Scores are plotted on a fixed `[0, 1]` axis, clamped if they stray.
pub fn render(title: &str, scores: &[f64], intervals: &[Interval]) -> String {
    let frames = scores.len().max(1);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |frame: f64| MARGIN + if frames == 1 { 0.0 } else { (frame - 1.0) / (frames - 1) as f64 * plot_w };
    let y = |s: f64| MARGIN + (1.0 - s.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.1}" font-family="sans-serif" font-size="13">{}</text>"#,
        MARGIN - 12.0,
        escape(title)
    );
    for iv in intervals {
        let x0 = x(iv.start as f64);
        let x1 = x(iv.end as f64).max(x0 + 1.0);
        let _ = writeln!(
            svg,
            r##"<rect class="ground-truth" x="{x0:.2}" y="{MARGIN}" width="{:.2}" height="{plot_h}" fill="#f4a6a6" fill-opacity="0.5"/>"##,
            x1 - x0
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    let points: Vec<String> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{:.2},{:.2}", x((i + 1) as f64), y(*s)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1f5fbf" stroke-width="1.5" points="{}"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.1}" font-family="sans-serif" font-size="11">frame 1</text>"#,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">frame {}</text>"#,
        WIDTH - MARGIN,
        HEIGHT - 12.0,
        scores.len()
    );
    svg.push_str("</svg>\n");
    svg
}
