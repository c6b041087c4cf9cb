//! CSV and SVG artifacts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use super::RunResult;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,test_acc,aoa_running,nc1,nc2,nc3,loss_real,loss_prep";

/// One row per evaluation. Floats use Rust's shortest round-trip formatting,
/// which is locale independent; missing values are empty fields.
pub fn write_csv(result: &RunResult, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for row in &result.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.step,
            row.test_acc,
            row.aoa_running,
            opt(row.nc.map(|n| n.nc1)),
            opt(row.nc.map(|n| n.nc2)),
            opt(row.nc.map(|n| n.nc3)),
            opt(row.loss_real),
            opt(row.loss_prep),
        )?;
    }
    Ok(())
}

pub fn emit_csv(result: &RunResult, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(result, &mut out)?;
    out.flush()?;
    Ok(())
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const DASHES: [&str; 3] = ["", "6 3", "2 3"];

/// Accuracy vs. stream position, one polyline per result. Disjoint-stream
/// task boundaries are drawn as dashed verticals.
pub fn write_svg(results: &[RunResult], labels: &[String]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    if labels.len() != results.len() {
        return Err(Error::ShapeMismatch {
            expected: results.len(),
            got: labels.len(),
        });
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_max = results.iter().map(|r| r.total_samples).max().unwrap_or(1).max(1) as f64;
    let sx = |pos: f64| LEFT + plot_w * pos / x_max;
    let sy = |acc: f64| TOP + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    let mut s = String::new();
    // writing to a String cannot fail
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">Test accuracy over the stream</text>"#,
        LEFT + plot_w / 2.0
    );

    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = sy(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let pos = x_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(pos),
            TOP + plot_h + 18.0,
            pos.round() as u64
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">stream position</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">accuracy</text>"#,
        TOP + plot_h / 2.0
    );

    let mut boundaries: Vec<usize> = results
        .iter()
        .flat_map(|r| r.task_boundaries.iter().copied())
        .collect();
    boundaries.sort_unstable();
    boundaries.dedup();
    for b in boundaries {
        let x = sx(b as f64);
        let _ = writeln!(
            s,
            r##"<line class="task-boundary" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 4"/>"##,
            TOP + plot_h
        );
    }

    for (i, (r, label)) in results.iter().zip(labels).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = DASHES[(i / COLORS.len()) % DASHES.len()];
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let points: Vec<String> = r
            .trace
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.position as f64), sy(p.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash_attr}/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash_attr}/>"#,
            lx + 24.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg(results: &[RunResult], labels: &[String], path: &Path) -> Result<()> {
    std::fs::write(path, write_svg(results, labels)?)?;
    Ok(())
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}
