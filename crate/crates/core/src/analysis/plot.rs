//! Plain-text and SVG renderings of scaling curves.

use std::fmt::Write;

use super::fit::GeometricFit;
use super::scaling::ScalingCurve;

/// Tab-separated `algorithm n nfe extend_calls best_score` rows.
pub fn render_table(curves: &[ScalingCurve]) -> String {
    let mut out = String::from("algorithm\tn\tnfe\textend_calls\tbest_score\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}",
                c.algorithm.as_str(),
                p.n,
                p.nfe,
                p.extend_calls,
                p.best_score
            );
        }
    }
    out
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Score against NFE (log x axis), one polyline per curve; fitted curves are
/// drawn dashed when supplied.
pub fn render_svg(curves: &[ScalingCurve], fits: &[Option<GeometricFit>]) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        let x = (p.nfe.max(1) as f64).log10();
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(p.best_score);
        y1 = y1.max(p.best_score);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r##"<rect width="100%" height="100%" fill="white"/><path d="M{pad} {pad} V{} H{}" stroke="#333" fill="none"/>"##,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">log10 NFE</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">best score</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx((p.nfe.max(1) as f64).log10()), sy(p.best_score)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - pad - 60.0,
            pad + 16.0 * i as f64,
            c.algorithm.as_str()
        );
        if let (Some(Some(fit)), Some(first)) = (fits.get(i), c.points.first()) {
            // NFE is linear in N along a curve; map through the first point
            let per_n = first.nfe as f64 / first.n.max(1) as f64;
            let fitted: Vec<String> = c
                .points
                .iter()
                .map(|p| {
                    let x = (p.n as f64 * per_n).max(1.0).log10();
                    format!("{:.2},{:.2}", sx(x), sy(fit.predict(p.n as f64)))
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="4 3"/>"#,
                fitted.join(" ")
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
