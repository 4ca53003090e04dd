//! Scatter plots of reflective samples as standalone SVG.

use std::fmt::Write as _;

use super::output::SampleRecord;

const SIZE: f64 = 600.0;
const PAD: f64 = 40.0;

/// Line `x[index_a] = x[index_b] + margin` drawn over the scatter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintLine {
    pub index_a: usize,
    pub index_b: usize,
    pub margin: f64,
}

/// Blue for the first round through red for the last.
pub fn round_colour(round: usize, last: usize) -> String {
    let f = if last == 0 { 0.0 } else { round as f64 / last as f64 };
    let r = (40.0 + 200.0 * f).round() as u8;
    let b = (220.0 - 190.0 * f).round() as u8;
    format!("#{r:02x}50{b:02x}")
}

fn marker(out: &mut String, shape: usize, x: f64, y: f64, fill: &str) {
    let s = 4.0;
    let _ = match shape % 4 {
        0 => writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{s}" fill="{fill}" fill-opacity="0.7"/>"#),
        1 => writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{}" fill="{fill}" fill-opacity="0.7"/>"#,
            x - s,
            y - s,
            2.0 * s,
            2.0 * s
        ),
        2 => writeln!(
            out,
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}" fill-opacity="0.7"/>"#,
            x,
            y - s,
            x - s,
            y + s,
            x + s,
            y + s
        ),
        _ => writeln!(
            out,
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}" fill-opacity="0.7"/>"#,
            x,
            y - s,
            x + s,
            y,
            x,
            y + s,
            x - s,
            y
        ),
    };
}

/// Plots the first two coordinates (or the only one against zero).
pub fn scatter_svg(records: &[SampleRecord], constraint: Option<ConstraintLine>) -> String {
    let coords = |r: &SampleRecord| {
        (r.x.as_slice().first().copied().unwrap_or(0.0), r.x.as_slice().get(1).copied().unwrap_or(0.0))
    };
    let mut lo = -1.0f64;
    let mut hi = 1.0f64;
    for r in records {
        let (x, y) = coords(r);
        if x.is_finite() && y.is_finite() {
            lo = lo.min(x).min(y);
            hi = hi.max(x).max(y);
        }
    }
    let span = hi - lo;
    let px = |v: f64| PAD + (v - lo) / span * (SIZE - 2.0 * PAD);
    let py = |v: f64| SIZE - px(v);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{w}" height="{w}" fill="none" stroke="#999999"/>"##,
        w = SIZE - 2.0 * PAD
    );
    if let Some(line) = constraint.filter(|l| l.index_a < 2 && l.index_b < 2 && l.index_a != l.index_b) {
        // Endpoints along the plotted range, solved for the axis that index_a names.
        let (p0, p1) = if line.index_a == 0 {
            ((lo + line.margin, lo), (hi + line.margin, hi))
        } else {
            ((lo, lo + line.margin), (hi, hi + line.margin))
        };
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333333" stroke-dasharray="6 4"/>"##,
            px(p0.0),
            py(p0.1),
            px(p1.0),
            py(p1.1)
        );
    }
    let last = records.iter().map(|r| r.round).max().unwrap_or(0);
    for r in records {
        let (x, y) = coords(r);
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let shape = r.condition.class_id().map_or(0, |c| c);
        marker(&mut out, shape, px(x), py(y), &round_colour(r.round, last));
    }
    out.push_str("</svg>\n");
    out
}
