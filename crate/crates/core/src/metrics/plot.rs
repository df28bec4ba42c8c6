//! Minimal standalone SVG charts.

use std::fmt::Write;

use super::{ConfusionMatrix, RocCurve};

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        M + (x - self.x0) / span * (W - 2.0 * M)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - M - (y - self.y0) / span * (H - 2.0 * M)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let _ = write!(
            out,
            r#"<path d="M{M} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
            t = M,
            b = H - M,
            r = W - M
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                H - M + 14.0,
                fmt_tick(xv)
            );
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                M - 4.0,
                self.py(yv) + 4.0,
                fmt_tick(yv)
            );
        }
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 10.0,
            escape(x_label)
        );
        let _ = write!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
        .collect();
    let _ = write!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        coords.join(" ")
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = M + 4.0 + 14.0 * i as f64;
        let color = COLORS[i % COLORS.len()];
        let _ = write!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            W - M - 90.0,
            y,
            W - M - 76.0,
            y + 4.0,
            escape(name)
        );
    }
}

/// ROC curves, one polyline per class, with the chance diagonal.
pub fn svg_roc(curves: &[(usize, RocCurve)]) -> String {
    let mut out = String::new();
    header(&mut out, "ROC");
    let frame = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    frame.axes(&mut out, "false positive rate", "true positive rate");
    polyline(&mut out, &frame, &[(0.0, 0.0), (1.0, 1.0)], "#bbbbbb");
    let mut names = Vec::new();
    for (i, (class, curve)) in curves.iter().enumerate() {
        let pts: Vec<(f64, f64)> = curve.fpr.iter().copied().zip(curve.tpr.iter().copied()).collect();
        polyline(&mut out, &frame, &pts, COLORS[i % COLORS.len()]);
        names.push(format!("class {class}"));
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Line chart of named `(x, y)` series.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let finite = series.iter().flat_map(|(_, p)| p).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in finite {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let frame = Frame {
        x0,
        x1,
        y0: y0.min(0.0),
        y1,
    };
    frame.axes(&mut out, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        polyline(&mut out, &frame, pts, COLORS[i % COLORS.len()]);
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Heatmap with rows as true classes and columns as predictions.
pub fn svg_confusion(cm: &ConfusionMatrix) -> String {
    let mut out = String::new();
    header(&mut out, "confusion matrix");
    let k = cm.class_count().max(1);
    let side = (H - 2.0 * M).min(W - 2.0 * M);
    let cell = side / k as f64;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (i, row) in cm.counts.iter().enumerate() {
        // per-row normalisation would hide class imbalance; shade by raw count
        for (j, v) in row.iter().enumerate() {
            let shade = 255.0 - 200.0 * (*v as f64 / max);
            let (x, y) = (M + j as f64 * cell, M + i as f64 * cell);
            let _ = write!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({s},{s},255)" stroke="white"/>"#,
                s = shade as u8
            );
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">predicted</text>"#,
        M + side / 2.0,
        M + side + 16.0
    );
    let _ = write!(
        out,
        r#"<text x="{x}" y="{y:.1}" text-anchor="middle" transform="rotate(-90 {x} {y:.1})">true</text>"#,
        x = M - 10.0,
        y = M + side / 2.0
    );
    out.push_str("</svg>\n");
    out
}
