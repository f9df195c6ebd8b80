//! Human-readable outputs: correlation table, Bland–Altman plot, run summary.

use std::fmt::Write;

use crate::model::{Status, Transcript};
use crate::stats::{AgreementReport, BlandAltman};

/// Markdown table with one row per metric.
pub fn correlation_table(reports: &[AgreementReport]) -> String {
    let mut out = String::from("| Model | Pearson | Spearman |\n|---|---|---|\n");
    for r in reports {
        let _ = writeln!(out, "| {} | {:.5} | {:.5} |", r.metric, r.pearson_r, r.spearman_rho);
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of (mean, difference) with lines at the mean difference and both
/// limits of agreement. Each line carries its value in `data-y`.
pub fn bland_altman_svg(metric: &str, ba: &BlandAltman) -> String {
    let means = ba.points.iter().map(|p| p.0);
    let diffs = ba.points.iter().map(|p| p.1).chain([ba.loa_low, ba.loa_high, ba.mean_diff]);
    let (x0, x1) = span(means.clone().fold(f64::INFINITY, f64::min), means.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = span(diffs.clone().fold(f64::INFINITY, f64::min), diffs.fold(f64::NEG_INFINITY, f64::max));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<title>Bland-Altman: {}</title>"#, escape(metric));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path class="axes" d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    );
    for (class, y, dash) in [
        ("mean-diff", ba.mean_diff, ""),
        ("loa-low", ba.loa_low, r#" stroke-dasharray="6 4""#),
        ("loa-high", ba.loa_high, r#" stroke-dasharray="6 4""#),
    ] {
        let _ = writeln!(
            s,
            r#"<line class="{class}" data-y="{y:.6}" x1="{left}" x2="{right}" y1="{py:.2}" y2="{py:.2}" stroke="gray"{dash}/>"#,
            py = py(y)
        );
        let _ = writeln!(
            s,
            r#"<text class="{class}-label" x="{right}" y="{:.2}" font-size="11" text-anchor="end">{y:.3}</text>"#,
            py(y) - 4.0
        );
    }
    for (m, d) in &ba.points {
        let _ = writeln!(
            s,
            r#"<circle class="point" data-mean="{m:.6}" data-diff="{d:.6}" cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            px(*m),
            py(*d)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">mean of {} and human</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(metric)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{} minus human</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(metric)
    );
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text class="x-tick" x="{:.2}" y="{:.1}" font-size="10" text-anchor="{anchor}">{x:.2}</text>"#,
            px(x),
            bottom + 14.0
        );
    }
    for y in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text class="y-tick" x="{:.1}" y="{:.2}" font-size="10" text-anchor="end">{y:.2}</text>"#,
            left - 4.0,
            py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Plain-text table of evaluated jobs: id, score, rounds, status.
pub fn summary_table(transcripts: &[Transcript]) -> String {
    let rows: Vec<[String; 4]> = transcripts
        .iter()
        .map(|t| {
            let score = t.score.as_ref().map(|s| format!("{:.1}", s.value)).unwrap_or_else(|| "-".into());
            let status = match (&t.status, &t.failure) {
                (Status::Failed, Some(f)) => format!("failed ({})", f.stage),
                (Status::Failed, None) => "failed".into(),
                (Status::Ok, _) => "ok".into(),
            };
            [t.prompt.id.clone(), score, t.refinement_rounds().to_string(), status]
        })
        .collect();
    let header = ["id", "score", "rounds", "status"].map(String::from);
    let widths: Vec<usize> =
        (0..4).map(|i| rows.iter().chain([&header]).map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let line = |r: &[String; 4]| {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        cells.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for r in &rows {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{bland_altman, PValueMethod};

    fn data_y(svg: &str, class: &str) -> f64 {
        let at = svg.find(&format!(r#"class="{class}" data-y=""#)).unwrap();
        let rest = &svg[at + class.len() + 17..];
        rest[..rest.find('"').unwrap()].parse().unwrap()
    }

    #[test]
    fn table_shape() {
        let ba = bland_altman(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let r = AgreementReport {
            metric: "ViCE".into(),
            n: 3,
            pearson_r: 0.332_494,
            pearson_p: 0.01,
            spearman_rho: 0.327_62,
            spearman_p: 0.01,
            spearman_p_method: PValueMethod::T,
            rescaled: false,
            bland_altman: ba,
        };
        let t = correlation_table(&[r]);
        assert_eq!(t, "| Model | Pearson | Spearman |\n|---|---|---|\n| ViCE | 0.33249 | 0.32762 |\n");
    }

    #[test]
    fn plot_lines_carry_values() {
        let ba = bland_altman(&[2.0, 4.0, 6.0], &[1.0, 5.0, 6.0]).unwrap();
        let svg = bland_altman_svg("m<1>", &ba);
        assert_eq!(data_y(&svg, "mean-diff"), 0.0);
        assert_eq!(data_y(&svg, "loa-low"), -1.96);
        assert_eq!(data_y(&svg, "loa-high"), 1.96);
        assert_eq!(svg.matches(r#"class="point""#).count(), 3);
        assert!(svg.contains("m&lt;1&gt;"));
        let flat = bland_altman_svg("same", &bland_altman(&[1.0, 2.0], &[1.0, 2.0]).unwrap());
        assert!(!flat.contains("NaN"));
    }
}
