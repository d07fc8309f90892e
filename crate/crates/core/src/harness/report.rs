//! Comparison tables and a size-versus-accuracy scatter from metric files.

use std::fmt::Write as _;
use std::path::Path;

use crate::domain::Class;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub fn read_reports(paths: &[impl AsRef<Path>]) -> Result<Vec<MetricReport>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MetricReport::from_json(&text).map_err(|e| Error::Sample {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Markdown IoU table: one row per report, per-class columns then overall.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut s = String::from(
        "| Method | Type | Left Hand | Right Hand | Left-hand Object | Right-hand Object | Two-hand Object | Overall | Illusion (%) |\n",
    );
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let kind = r.config.get("report.type").map_or("-", String::as_str);
        let _ = write!(s, "| {} | {} |", r.name, kind);
        for c in Class::ALL {
            let _ = write!(s, " {} |", pct(r.per_class_iou[c.index()]));
        }
        let _ = writeln!(s, " {} | {:.2} |", pct(r.miou), 100.0 * r.illusion_rate);
    }
    s
}

/// `(parameters in millions, mIoU in percent)` for reports that carry both.
pub fn scatter_points(reports: &[MetricReport]) -> Vec<(String, f64, f64)> {
    reports
        .iter()
        .filter_map(|r| Some((r.name.clone(), r.parameter_count? as f64 / 1e6, 100.0 * r.miou?)))
        .collect()
}

/// SVG scatter of model size against mIoU with labelled points.
pub fn render_scatter(reports: &[MetricReport]) -> String {
    let pts = scatter_points(reports);
    let (w, h, m) = (640.0, 420.0, 60.0);
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.1 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(pts.iter().map(|p| p.1).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.2).collect());
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">Parameters (M)</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">mIoU (%)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (name, x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="steelblue" data-params-m="{x}" data-miou="{y}"/><text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
            sx(*x),
            sy(*y),
            sx(*x) + 8.0,
            sy(*y) - 8.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write `table.md` and `scatter.svg` into `out_dir`.
pub fn write_report(paths: &[impl AsRef<Path>], out_dir: &Path) -> Result<()> {
    let reports = read_reports(paths)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join("table.md");
    std::fs::write(&table, render_table(&reports)).map_err(|e| Error::io(&table, e))?;
    let svg = out_dir.join("scatter.svg");
    std::fs::write(&svg, render_scatter(&reports)).map_err(|e| Error::io(&svg, e))?;
    Ok(())
}
