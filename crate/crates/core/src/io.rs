//! CSV and SVG output. Every CSV has a header row and ends with a
//! `# config_hash=<sha256>` comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::deeponet::TrainingReport;
use crate::error::{Error, Result};

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Creates `dir`; fails if it already exists.
pub fn create_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::Io(format!("{} already exists; run directories are write-once", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>], config_hash: &str) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    let _ = writeln!(out, "# config_hash={config_hash}");
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], config_hash: &str) -> Result<()> {
    fs::write(path, csv_string(header, rows, config_hash))?;
    Ok(())
}

/// One row per epoch; `eps1_hat`/`eps2_hat` are filled on the last row
/// only, since they are measured after training. `wall_ms` is left empty
/// unless `timing` is set, so deterministic runs write identical files.
pub fn write_training_csv(path: &Path, report: &TrainingReport, config_hash: &str, timing: bool) -> Result<()> {
    let ms = |v: f64| if timing { format!("{v:.3}") } else { String::new() };
    let last = report.epochs.len().saturating_sub(1);
    let mut rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (a, b) = if i == last {
                (num(report.eps1_hat), num(report.eps2_hat))
            } else {
                (String::new(), String::new())
            };
            vec![e.epoch.to_string(), num(e.l1), num(e.l2), a, b, ms(e.wall_ms)]
        })
        .collect();
    if rows.is_empty() {
        rows.push(vec![
            "0".into(),
            num(report.initial_l1),
            num(report.initial_l2),
            num(report.eps1_hat),
            num(report.eps2_hat),
            ms(report.wall_ms),
        ]);
    }
    write_csv(
        path,
        &["epoch", "L1", "L2", "eps1_hat", "eps2_hat", "wall_ms"],
        &rows,
        config_hash,
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Single-series line plot with axes, tick labels and a title.
pub fn svg_polyline(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let finite = |v: &[f64]| -> (f64, f64) {
        let (lo, hi) = v
            .iter()
            .filter(|x| x.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = finite(xs);
    let (y0, y1) = finite(ys);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    for (v, x, y, anchor) in [
        (x0, M, H - M + 18.0, "start"),
        (x1, W - M, H - M + 18.0, "end"),
        (y0, M - 6.0, H - M, "end"),
        (y1, M - 6.0, M + 4.0, "end"),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="11" text-anchor="{anchor}">{v:.4}</text>"#
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        pts.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64]) -> Result<()> {
    fs::write(path, svg_polyline(title, xlabel, ylabel, xs, ys))?;
    Ok(())
}
