//! Entropy curve of one rollout as CSV and SVG.

use std::fmt::Write as _;

use multichunk::executor::DecisionRecord;

use crate::error::{CliError, CliResult};

pub const CSV_HEADER: &str = "decision_index,base_step,entropy,frequency_index";

const BAND_COLORS: [&str; 4] = ["#2b83ba", "#abdda4", "#fdae61", "#d7191c"];

/// `(decision_index, base_step, entropy, frequency_index)` rows. Fails on an
/// empty trace or one recorded without entropy gating.
pub fn rows(decisions: &[DecisionRecord]) -> CliResult<Vec<(usize, usize, f64, usize)>> {
    if decisions.is_empty() {
        return Err(CliError::User("trace has no decisions".into()));
    }
    decisions
        .iter()
        .map(|d| match d.entropy {
            Some(h) => Ok((d.decision_index, d.base_step, h, d.frequency_index)),
            None => Err(CliError::User(format!(
                "decision {} has no entropy; was the trace recorded with a fixed frequency?",
                d.decision_index
            ))),
        })
        .collect()
}

pub fn csv(rows: &[(usize, usize, f64, usize)]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (i, t, h, m) in rows {
        let _ = writeln!(s, "{i},{t},{h},{m}");
    }
    s
}

/// Entropy against decision index, with each decision's column shaded by
/// the frequency it selected.
pub fn svg(rows: &[(usize, usize, f64, usize)], title: &str) -> String {
    let (w, h, pad) = (800.0, 320.0, 48.0);
    let n = rows.len() as f64;
    let lo = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let x = |i: f64| pad + (w - 2.0 * pad) * (i + 0.5) / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let col = (w - 2.0 * pad) / n;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, r) in rows.iter().enumerate() {
        let color = BAND_COLORS[r.3 % BAND_COLORS.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{pad}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.25"/>"#,
            x(k as f64) - col / 2.0,
            col,
            h - 2.0 * pad
        );
    }
    let points: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| format!("{:.2},{:.2}", x(k as f64), y(r.2)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{:.0}" font-size="12">{hi:.3}</text>"#,
        pad - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{:.0}" font-size="12">{lo:.3}</text>"#,
        h - pad + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" font-size="12" text-anchor="middle">decision index</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
