//! Minimal deterministic SVG output: ID/OOD scatter plots, the risk curves
//! of a spurious sweep and the panel strip of a shift sweep.

use std::fmt::Write as _;

use crate::landscape::{ModelPoint, ShiftStep};
use crate::theorem::SweepStep;

const ID_SELECTED: &str = "#1f4fd8";
const OOD_SELECTED: &str = "#d62728";
const ERM_FILL: &str = "#555555";
const DIVERSE_FILL: &str = "#f2a900";

/// Maps a data rectangle onto a pixel rectangle (y grows downwards).
#[derive(Clone, Copy, Debug)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }
}

/// Padded `[min, max]` of `values`, at least `min_width` wide.
fn range(values: impl Iterator<Item = f64>, min_width: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let mid = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(0.5 * min_width) * 1.08;
    (mid - half, mid + half)
}

/// Round-valued tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(svg: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
}

fn axes(svg: &mut String, f: &Frame, xlabel: &str, ylabel: &str, title: &str) {
    let (l, t, w, h) = (f.left, f.top, f.width, f.height);
    let _ = writeln!(
        svg,
        r#"<rect x="{l:.2}" y="{t:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    for v in ticks(f.x.0, f.x.1, 5) {
        let x = f.px(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            t + h,
            t + h + 4.0,
            t + h + 16.0,
            tick_label(v)
        );
    }
    for v in ticks(f.y.0, f.y.1, 5) {
        let y = f.py(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{l:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            l - 4.0,
            l - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        l + w / 2.0,
        t + h + 34.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        l - 44.0,
        t + h / 2.0,
        l - 44.0,
        t + h / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        l + w / 2.0,
        t - 8.0,
        escape(title)
    );
}

fn legend(svg: &mut String, x: f64, y: f64, entries: &[(&str, String)]) {
    for (i, (label, mark)) in entries.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "{}",
            mark.replace("{X}", &format!("{x:.2}"))
                .replace("{Y}", &format!("{yy:.2}"))
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 10.0,
            yy + 4.0,
            escape(label)
        );
    }
}

fn marker(p: &ModelPoint, x: f64, y: f64) -> String {
    if p.method == "erm" {
        format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{ERM_FILL}" fill-opacity="0.7"/>"#)
    } else {
        format!(
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{DIVERSE_FILL}" fill-opacity="0.8"/>"#,
            x - 3.0,
            y - 3.0
        )
    }
}

fn is_in(p: &ModelPoint, set: &[ModelPoint]) -> bool {
    set.iter()
        .any(|q| q.run_id == p.run_id && q.model_idx == p.model_idx && q.epoch == p.epoch)
}

fn draw_points(
    svg: &mut String,
    f: &Frame,
    points: &[ModelPoint],
    by_id: &[ModelPoint],
    by_ood: &[ModelPoint],
) {
    for p in points {
        let _ = writeln!(svg, "{}", marker(p, f.px(p.id_metric), f.py(p.ood_metric)));
    }
    for (set, color, r) in [(by_ood, OOD_SELECTED, 6.5), (by_id, ID_SELECTED, 5.0)] {
        for p in points.iter().filter(|p| is_in(p, set)) {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                f.px(p.id_metric),
                f.py(p.ood_metric)
            );
        }
    }
}

/// ID accuracy (x) against OOD accuracy (y). ERM points are grey circles,
/// other methods orange squares; ID-selected points are ringed in blue and
/// OOD-selected points in red.
pub fn scatter_svg(
    points: &[ModelPoint],
    by_id: &[ModelPoint],
    by_ood: &[ModelPoint],
    title: &str,
) -> String {
    let f = Frame {
        x: range(points.iter().map(|p| p.id_metric), 0.02),
        y: range(points.iter().map(|p| p.ood_metric), 0.02),
        left: 70.0,
        top: 30.0,
        width: 420.0,
        height: 320.0,
    };
    let mut svg = String::new();
    header(&mut svg, 640.0, 400.0);
    axes(&mut svg, &f, "ID accuracy", "OOD accuracy", title);
    draw_points(&mut svg, &f, points, by_id, by_ood);
    legend(
        &mut svg,
        505.0,
        50.0,
        &[
            (
                "ERM",
                format!(r#"<circle cx="{{X}}" cy="{{Y}}" r="3" fill="{ERM_FILL}"/>"#),
            ),
            (
                "diverse",
                format!(
                    r#"<rect x="{{X}}" y="{{Y}}" width="6" height="6" fill="{DIVERSE_FILL}" transform="translate(-3 -3)"/>"#
                ),
            ),
            (
                "best ID epoch",
                format!(
                    r#"<circle cx="{{X}}" cy="{{Y}}" r="5" fill="none" stroke="{ID_SELECTED}" stroke-width="1.8"/>"#
                ),
            ),
            (
                "best OOD epoch",
                format!(
                    r#"<circle cx="{{X}}" cy="{{Y}}" r="5" fill="none" stroke="{OOD_SELECTED}" stroke-width="1.8"/>"#
                ),
            ),
        ],
    );
    svg.push_str("</svg>\n");
    svg
}

/// ID and OOD transfer risk against the number of selected features.
pub fn risk_curves_svg(steps: &[SweepStep]) -> String {
    let xs = steps.iter().map(|s| s.d_hat as f64);
    let ys = steps.iter().flat_map(|s| [s.l_id, s.l_ood]).chain([0.0]);
    let f = Frame {
        x: range(xs, 1.0),
        y: range(ys, 0.1),
        left: 70.0,
        top: 30.0,
        width: 420.0,
        height: 320.0,
    };
    let mut svg = String::new();
    header(&mut svg, 640.0, 400.0);
    axes(
        &mut svg,
        &f,
        "number of features",
        "risk (MSE)",
        "ID fit: ID and OOD risk",
    );
    for (color, get) in [
        (
            ID_SELECTED,
            (|s: &SweepStep| s.l_id) as fn(&SweepStep) -> f64,
        ),
        (OOD_SELECTED, |s| s.l_ood),
    ] {
        let pts: Vec<String> = steps
            .iter()
            .map(|s| format!("{:.2},{:.2}", f.px(s.d_hat as f64), f.py(get(s))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for s in steps {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                f.px(s.d_hat as f64),
                f.py(get(s))
            );
        }
    }
    legend(
        &mut svg,
        505.0,
        50.0,
        &[
            (
                "L_ID",
                format!(r#"<circle cx="{{X}}" cy="{{Y}}" r="3" fill="{ID_SELECTED}"/>"#),
            ),
            (
                "L_OOD",
                format!(r#"<circle cx="{{X}}" cy="{{Y}}" r="3" fill="{OOD_SELECTED}"/>"#),
            ),
        ],
    );
    svg.push_str("</svg>\n");
    svg
}

/// One scatter panel per shift step, titled with `t` and the pattern label.
pub fn shift_strip_svg(steps: &[ShiftStep]) -> String {
    let (pw, ph, gap) = (220.0, 200.0, 70.0);
    let width = 60.0 + steps.len() as f64 * (pw + gap);
    let mut svg = String::new();
    header(&mut svg, width, ph + 90.0);
    for (k, s) in steps.iter().enumerate() {
        let f = Frame {
            x: range(s.points.iter().map(|p| p.id_metric), 0.02),
            y: range(s.points.iter().map(|p| p.ood_metric), 0.02),
            left: 60.0 + k as f64 * (pw + gap),
            top: 30.0,
            width: pw,
            height: ph,
        };
        let title = format!(
            "t = {} : {} (r = {:.2})",
            s.t, s.label.pattern, s.label.pearson_r
        );
        axes(&mut svg, &f, "ID accuracy", "OOD accuracy", &title);
        draw_points(&mut svg, &f, &s.points, &[], &[]);
    }
    svg.push_str("</svg>\n");
    svg
}
