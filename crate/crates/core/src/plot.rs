//! Minimal static SVG charts: per-layer metric curves and accuracy bars.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named polyline of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One bar with an optional symmetric error bar. `None` values are drawn
/// as a gap labelled with an em dash.
#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: Option<f64>,
    pub error: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let y = f.py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

/// Line chart with one polyline and legend entry per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut x_lo, mut x_hi) = finite_range(xs);
    if series.iter().all(|s| s.points.len() <= 1) {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    let frame = Frame {
        x: (x_lo, x_hi),
        y: finite_range(ys),
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);

    let mut ticks: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks.iter().filter(|x| x.is_finite()) {
        let px = frame.px(*x);
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{}" text-anchor="middle">{x}</text>"#,
            HEIGHT - MARGIN + 16.0
        );
    }

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&s.name),
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let lx = WIDTH - MARGIN + 6.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 14.0,
            lx + 18.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with error bars of `value ± error`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let values = bars
        .iter()
        .filter_map(|b| b.value.map(|v| [v - b.error, v + b.error]))
        .flatten();
    let (lo, hi) = finite_range(values.chain([0.0]));
    let frame = Frame {
        x: (0.0, bars.len().max(1) as f64),
        y: (lo.min(0.0), hi),
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "", y_label);
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let cx = frame.px(i as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN + 16.0,
            escape(&b.label)
        );
        let Some(v) = b.value else {
            let _ = writeln!(
                out,
                r#"<text class="missing" x="{cx:.2}" y="{:.2}" text-anchor="middle">—</text>"#,
                frame.py(frame.y.0) - 6.0
            );
            continue;
        };
        let (top, base) = (frame.py(v), frame.py(frame.y.0.max(0.0)));
        let w = slot * 0.6;
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{}"/>"#,
            cx - w / 2.0,
            top.min(base),
            (base - top).abs(),
            COLORS[i % COLORS.len()]
        );
        if b.error > 0.0 {
            let (e_hi, e_lo) = (frame.py(v + b.error), frame.py(v - b.error));
            let _ = writeln!(
                out,
                r#"<path class="error" d="M{cx:.2},{e_hi:.2} L{cx:.2},{e_lo:.2} M{:.2},{e_hi:.2} L{:.2},{e_hi:.2} M{:.2},{e_lo:.2} L{:.2},{e_lo:.2}" stroke="black"/>"#,
                cx - 6.0,
                cx + 6.0,
                cx - 6.0,
                cx + 6.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
