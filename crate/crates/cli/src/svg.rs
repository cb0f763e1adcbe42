//! Minimal hand-written SVG charts. Output depends only on the inputs.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 44.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(w: f64, h: f64, title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>", w / 2.0, escape(title)).unwrap();
    s
}

/// Value range padded by 5% and never empty.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
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

fn axes(s: &mut String, x_labels: &[String], lo: f64, hi: f64, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    writeln!(s, "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" stroke=\"black\" fill=\"none\"/>").unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            x0 - 4.0,
            y + 4.0
        )
        .unwrap();
        writeln!(s, "<path d=\"M{x0} {y:.1} L{x1} {y:.1}\" stroke=\"#ddd\"/>").unwrap();
    }
    for (i, l) in x_labels.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x_at(i, x_labels.len()),
            y0 + 16.0,
            escape(l)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn x_at(i: usize, n: usize) -> f64 {
    let inner = W - LEFT - RIGHT;
    LEFT + inner * (i as f64 + 0.5) / n.max(1) as f64
}

fn y_at(v: f64, lo: f64, hi: f64) -> f64 {
    let y0 = H - BOTTOM;
    y0 - (y0 - TOP) * (v - lo) / (hi - lo)
}

/// One polyline per series over categorical x positions.
pub fn line_chart(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)], y_label: &str) -> String {
    let (lo, hi) = span(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut s = open(W, H, title);
    axes(&mut s, x_labels, lo, hi, y_label);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i, x_labels.len()), y_at(*v, lo, hi)))
            .collect();
        writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" ")).unwrap();
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>").unwrap();
        }
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            W - RIGHT - 90.0,
            TOP + 14.0 * (k as f64 + 1.0),
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars over categorical x positions.
pub fn bar_chart(title: &str, x_labels: &[String], values: &[f64], y_label: &str) -> String {
    let (_, hi) = span(values.iter().copied().chain([0.0]));
    let lo = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::min);
    let mut s = open(W, H, title);
    axes(&mut s, x_labels, lo, hi, y_label);
    let width = 0.6 * (W - LEFT - RIGHT) / x_labels.len().max(1) as f64;
    for (i, v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
        let (ya, yb) = (y_at(*v, lo, hi), y_at(0.0, lo, hi));
        writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{width:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            x_at(i, x_labels.len()) - width / 2.0,
            ya.min(yb),
            (ya - yb).abs(),
            PALETTE[0]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Count matrix as shaded cells; rows are true classes, columns predictions.
pub fn heatmap(title: &str, labels: &[String], counts: &[Vec<usize>]) -> String {
    let n = labels.len();
    let cell = 36.0;
    let (x0, y0) = (64.0, 40.0);
    let (w, h) = (x0 + cell * n as f64 + 20.0, y0 + cell * n as f64 + 44.0);
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = open(w, h, title);
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let shade = 255 - (200.0 * c as f64 / max).round() as u8;
            let (x, y) = (x0 + cell * j as f64, y0 + cell * i as f64);
            writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"/>"
            )
            .unwrap();
            writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{c}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            )
            .unwrap();
        }
    }
    for (k, l) in labels.iter().enumerate() {
        let mid = cell * k as f64 + cell / 2.0;
        writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 6.0, y0 + mid + 4.0, escape(l)).unwrap();
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x0 + mid,
            y0 + cell * n as f64 + 16.0,
            escape(l)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">predicted (rows: true)</text>",
        x0 + cell * n as f64 / 2.0,
        y0 + cell * n as f64 + 34.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}
