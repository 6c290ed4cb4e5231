//! Minimal SVG output: axes and polylines.

use std::fmt::Write as _;

use crate::flow::FlowTensor;

const PANEL: f64 = 240.0;
const MARGIN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub color: &'static str,
    pub dashed: bool,
}

/// One square panel with axes, a title and polylines in data coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub lines: Vec<Polyline>,
}

fn bounds(panel: &Panel) -> ([f64; 2], [f64; 2]) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in panel.lines.iter().flat_map(|l| &l.points) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    for a in 0..2 {
        if !lo[a].is_finite() {
            (lo[a], hi[a]) = (0.0, 1.0);
        }
        let pad = ((hi[a] - lo[a]) * 0.05).max(1e-3);
        lo[a] -= pad;
        hi[a] += pad;
    }
    (lo, hi)
}

/// Lays `panels` out left to right.
pub fn render(panels: &[Panel]) -> String {
    let width = panels.len() as f64 * (PANEL + 2.0 * MARGIN);
    let height = PANEL + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i as f64 * (PANEL + 2.0 * MARGIN) + MARGIN;
        let y0 = MARGIN;
        let (lo, hi) = bounds(panel);
        let map = |p: [f64; 2]| {
            let u = x0 + (p[0] - lo[0]) / (hi[0] - lo[0]) * PANEL;
            let v = y0 + PANEL - (p[1] - lo[1]) / (hi[1] - lo[1]) * PANEL;
            (u, v)
        };
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            x0 + PANEL / 2.0,
            y0 - 8.0,
            panel.title
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{} [{:.2}, {:.2}]</text>"#,
            x0 + PANEL / 2.0,
            y0 + PANEL + 16.0,
            panel.x_label,
            lo[0],
            hi[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle" transform="rotate(-90 {} {})">{} [{:.2}, {:.2}]</text>"#,
            x0 - 8.0,
            y0 + PANEL / 2.0,
            x0 - 8.0,
            y0 + PANEL / 2.0,
            panel.y_label,
            lo[1],
            hi[1]
        );
        for line in &panel.lines {
            let pts: Vec<String> = line
                .points
                .iter()
                .map(|&p| map(p))
                .map(|(u, v)| format!("{u:.2},{v:.2}"))
                .collect();
            let dash = if line.dashed {
                r#" stroke-dasharray="4 3""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1"{dash}/>"#,
                pts.join(" "),
                line.color
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Keypoint trajectories across the keyframes of each flow, in the xy, xz
/// and yz planes. Zero-weight points are skipped.
pub fn flow_projections(flows: &[(&FlowTensor, &'static str, bool)]) -> String {
    let planes = [
        ("xy", 0, 1, "x", "y"),
        ("xz", 0, 2, "x", "z"),
        ("yz", 1, 2, "y", "z"),
    ];
    let panels: Vec<Panel> = planes
        .iter()
        .map(|&(title, a, b, xl, yl)| {
            let mut lines = Vec::new();
            for &(flow, color, dashed) in flows {
                for n in 0..flow.keypoints() {
                    let points = (0..flow.keyframes())
                        .filter(|&k| flow.weight(k, n) > 0.0)
                        .map(|k| {
                            let p = flow.point(k, n);
                            [p[a], p[b]]
                        })
                        .collect();
                    lines.push(Polyline {
                        points,
                        color,
                        dashed,
                    });
                }
            }
            Panel {
                title: title.into(),
                x_label: xl,
                y_label: yl,
                lines,
            }
        })
        .collect();
    render(&panels)
}
