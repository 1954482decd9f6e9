//! Minimal SVG line chart of a metric timeline.

use std::fmt::Write;

use expandr_core::metrics::MetricTimeline;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// One polyline per metric, each scaled to its own maximum so the trends share an axis.
pub fn line_chart(timeline: &MetricTimeline) -> String {
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("informativeness", "#1f77b4", timeline.points.iter().map(|p| p.informativeness).collect()),
        ("diversity", "#2ca02c", timeline.points.iter().map(|p| p.diversity).collect()),
        ("distance", "#d62728", timeline.points.iter().map(|p| p.distance).collect()),
    ];
    let iterations: Vec<f64> = timeline.points.iter().map(|p| p.iteration as f64).collect();
    let x_max = iterations.iter().copied().fold(1.0, f64::max);
    let x = |it: f64| MARGIN + it / x_max * (WIDTH - 2.0 * MARGIN);
    let y = |v: f64| HEIGHT - MARGIN - v * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="#444"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="#444"/>"##,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for it in &iterations {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{it}</text>"#,
            x(*it),
            HEIGHT - MARGIN + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0
    );
    for (n, (name, color, values)) in series.iter().enumerate() {
        let max = values.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        let pts: Vec<String> = iterations
            .iter()
            .zip(values)
            .map(|(it, v)| format!("{:.1},{:.1}", x(*it), y(v * scale)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name} (max {max:.3})</text>"#,
            MARGIN + 8.0,
            MARGIN - 28.0 + 14.0 * n as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
